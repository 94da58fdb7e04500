use proptest::prelude::*;
use qexplorer_core::eval::{extract_queries_model, extractive_mask, Decoding};
use qexplorer_core::lm::{GenerationConfig, ModelConfig, ModelParams, Tokenizer, EOS};
use qexplorer_core::Float;

fn allowed(tok: &Tokenizer, content: &str, done: &str) -> String {
    let mut mask = extractive_mask(tok, content);
    let mut logits = vec![0.0 as Float; tok.vocab_size()];
    mask(&tok.encode(done), &mut logits);
    let mut out = String::new();
    for (t, z) in logits.iter().enumerate() {
        if *z == 0.0 {
            if t as u32 == EOS {
                out.push('$');
            } else {
                out.push_str(&tok.decode(&[t as u32]));
            }
        }
    }
    out
}

#[test]
fn mask_admits_exactly_the_substring_continuations() {
    let tok = Tokenizer::from_texts(["ab, cz"]);
    let content = "abcab";
    // '$' stands for end of output; specials and 'z' never appear.
    assert_eq!(allowed(&tok, content, ""), "abc");
    assert_eq!(allowed(&tok, content, "a"), "b");
    assert_eq!(allowed(&tok, content, "ab"), "$,c");
    assert_eq!(allowed(&tok, content, "ab,"), " ");
    assert_eq!(allowed(&tok, content, "ab, "), "abc");
    assert_eq!(allowed(&tok, content, "ab, c"), "a");
    assert_eq!(allowed(&tok, content, "ab, ca"), "$,b");
    assert_eq!(allowed(&tok, content, "abcab"), "$,");
}

fn random_model(vocab_size: usize, seed: u64) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            vocab_size,
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_length: 96,
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extractive_queries_are_substrings(content in "[a-f0-9]{3,30}", seed in 0u64..1000) {
        let tok = Tokenizer::from_texts(["abcdef0123456789, "]);
        let params = random_model(tok.vocab_size(), seed);
        let generation = GenerationConfig { max_new_tokens: 24, ..GenerationConfig::default() };
        let (run, raw) = extract_queries_model(
            "m", &params, &tok, &[(0, content.as_str())], &generation, Decoding::Extractive, 1,
        ).unwrap();
        let queries = &run.reports[0].queries;
        for (i, q) in queries.iter().enumerate() {
            prop_assert!(content.contains(q.as_str()), "{q:?} not in {content:?}");
            // Only the last keyword can be cut short by the token budget.
            prop_assert!(q.chars().count() >= 2 || i + 1 == queries.len(), "{raw:?}");
        }
    }
}
