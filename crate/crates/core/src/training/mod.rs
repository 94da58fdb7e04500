//! Supervised fine-tuning, preference optimisation and their optimiser.
//!
//! Sequence log-likelihoods are sums of label-token log-probabilities; losses
//! are averaged over the records of a batch. Only label tokens are scored:
//! the prompt conditions the model but never contributes to a loss.

mod gradcheck;
mod losses;
mod optim;
mod trainer;

pub use gradcheck::{grad_check, relative_error};
pub use losses::{
    combined_gradient, combined_loss, dpo_gradient, dpo_loss, reference_logps, sequence_logp, sft_gradient, sft_loss,
    DpoStats,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use trainer::{pretrain, train_dpo, train_sft, EpochLog};

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasets::prompt::{model_prompt, OUTPUT_PREFIX};
use crate::datasets::{PreferenceRecord, SftRecord};
use crate::float::Float;
use crate::lm::{LmError, Sequence, Tokenizer, BOS, EOS, INSTRUCTION, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: Float,
    pub sft_epochs: usize,
    pub dpo_epochs: usize,
    pub beta: Float,
    pub gamma: Float,
    pub batch_size: usize,
    pub seed: u64,
    /// Context length in tokens; prompts are cut from the head to fit.
    pub cutoff: usize,
    pub weight_decay: Float,
    pub adam_beta1: Float,
    pub adam_beta2: Float,
    pub adam_eps: Float,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<Float>,
    pub lora_rank: usize,
    pub lora_alpha: Float,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            sft_epochs: 2,
            dpo_epochs: 5,
            beta: 0.1,
            gamma: 1.0,
            batch_size: 8,
            seed: 0,
            cutoff: 512,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: None,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be > 0");
        }
        if !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return bad("optimizer coefficients out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("record {index}: {reason}")]
    Validation { index: usize, reason: String },
    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFinite { tensor: String, step: u64 },
}

/// A prompt with a preferred and a dispreferred continuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub preferred: Vec<u32>,
    pub dispreferred: Vec<u32>,
}

impl PreferencePair {
    pub fn preferred_seq(&self) -> Sequence {
        Sequence::new(self.prompt.clone(), self.preferred.clone())
    }

    pub fn dispreferred_seq(&self) -> Sequence {
        Sequence::new(self.prompt.clone(), self.dispreferred.clone())
    }
}

/// Model prompt for `prompt_text`: BOS, the text, then SEP standing for the
/// fixed output preamble. A leading instruction text collapses into the
/// single INSTRUCTION token. The preamble is supplied rather than generated,
/// so the model is scored and decoded on the keyword list alone.
pub fn prompt_tokens(tok: &Tokenizer, prompt_text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(prompt_text.len() + 3);
    out.push(BOS);
    let opening = model_prompt("");
    match prompt_text.strip_prefix(opening.as_str()) {
        Some(content) => {
            out.push(INSTRUCTION);
            out.extend(tok.encode(content));
        }
        None => out.extend(tok.encode(prompt_text)),
    }
    out.push(SEP);
    out
}

/// Label tokens of a rendered output: the text after the preamble, then EOS.
pub fn answer_tokens(tok: &Tokenizer, output: &str) -> Option<Vec<u32>> {
    let rest = output.strip_prefix(OUTPUT_PREFIX)?;
    let mut out = tok.encode(rest);
    out.push(EOS);
    Some(out)
}

/// Prompt tokens for extracting keywords from `content`.
pub fn content_prompt(tok: &Tokenizer, content: &str) -> Vec<u32> {
    prompt_tokens(tok, &model_prompt(content))
}

/// Encodes SFT records. Records whose label cannot fit `cutoff` are
/// skipped and counted.
pub fn encode_sft(tok: &Tokenizer, records: &[SftRecord], cutoff: usize) -> Result<(Vec<Sequence>, usize), TrainError> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (index, r) in records.iter().enumerate() {
        let label = answer_tokens(tok, &r.output).ok_or_else(|| TrainError::Validation {
            index,
            reason: "output lacks the preamble".into(),
        })?;
        if label.len() > cutoff {
            skipped += 1;
            continue;
        }
        out.push(Sequence::new(prompt_tokens(tok, &r.prompt()), label));
    }
    Ok((out, skipped))
}

/// Encodes preference records, skipping (and counting) pairs whose longer
/// answer cannot fit `cutoff`.
pub fn encode_preferences(
    tok: &Tokenizer,
    records: &[PreferenceRecord],
    cutoff: usize,
) -> Result<(Vec<PreferencePair>, usize), TrainError> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (index, r) in records.iter().enumerate() {
        let answer = |s: &str| {
            answer_tokens(tok, s).ok_or_else(|| TrainError::Validation {
                index,
                reason: "answer lacks the preamble".into(),
            })
        };
        let preferred = answer(&r.answer[0])?;
        let dispreferred = answer(&r.answer[1])?;
        if preferred == dispreferred {
            return Err(TrainError::Validation {
                index,
                reason: "preferred and dispreferred answers are identical".into(),
            });
        }
        if preferred.len().max(dispreferred.len()) > cutoff {
            skipped += 1;
            continue;
        }
        out.push(PreferencePair {
            prompt: prompt_tokens(tok, &r.prompt()),
            preferred,
            dispreferred,
        });
    }
    Ok((out, skipped))
}

pub(crate) fn validate_sequences(seqs: &[Sequence], cutoff: usize) -> Result<(), TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for (index, s) in seqs.iter().enumerate() {
        s.window(cutoff).map_err(|e| TrainError::Validation {
            index,
            reason: alloc::format!("{e}"),
        })?;
    }
    Ok(())
}

pub(crate) fn validate_pairs(pairs: &[PreferencePair], cutoff: usize) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for (index, p) in pairs.iter().enumerate() {
        let invalid = |reason: String| TrainError::Validation { index, reason };
        if p.preferred == p.dispreferred {
            return Err(invalid("preferred and dispreferred answers are identical".into()));
        }
        for s in [p.preferred_seq(), p.dispreferred_seq()] {
            s.window(cutoff).map_err(|e| invalid(alloc::format!("{e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::prompt::{render_output, render_preference};
    use alloc::vec;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts([
            OUTPUT_PREFIX,
            crate::datasets::prompt::SYSTEM_PROMPT,
            "abc,xyz 0123456789",
        ])
    }

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.learning_rate, c.sft_epochs, c.dpo_epochs, c.beta, c.gamma),
            (3e-5, 2, 5, 0.1, 1.0)
        );
        assert!(c.validate().is_ok());
        assert!(TrainConfig { beta: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig {
            gamma: -1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn label_is_keyword_list_and_eos() {
        let t = tok();
        let rec = SftRecord::new("abc xyz", &["abc".into(), "xy".into()]);
        let (seqs, skipped) = encode_sft(&t, core::slice::from_ref(&rec), 64).unwrap();
        assert_eq!(skipped, 0);
        let s = &seqs[0];
        assert_eq!(s.label.last(), Some(&EOS));
        assert_eq!(t.decode(&s.label), "abc,xy");
        let mut expected = vec![BOS, INSTRUCTION];
        expected.extend(t.encode("abc xyz"));
        expected.push(SEP);
        assert_eq!(s.prompt, expected);
        // preference prompts open with the same instruction text
        let pref = render_preference(&crate::datasets::PreferenceTriple {
            content: "abc xyz".into(),
            preferred: vec!["abc".into()],
            dispreferred: vec!["xy".into()],
        });
        assert_eq!(encode_preferences(&t, &[pref], 64).unwrap().0[0].prompt, expected);
        assert_eq!(
            prompt_tokens(&t, "xyz"),
            [BOS, t.id('x').unwrap(), t.id('y').unwrap(), t.id('z').unwrap(), SEP]
        );
        let (seqs, skipped) = encode_sft(&t, &[rec], 3).unwrap();
        assert!(seqs.is_empty());
        assert_eq!(skipped, 1);

        let broken = SftRecord {
            output: "abc".into(),
            ..SftRecord::new("abc", &[])
        };
        assert!(matches!(
            encode_sft(&t, &[broken], 64),
            Err(TrainError::Validation { index: 0, .. })
        ));
    }

    #[test]
    fn identical_answers_are_rejected() {
        let t = tok();
        let rec = PreferenceRecord {
            question: "q".into(),
            answer: [render_output(&["ab".into()]), render_output(&["ab".into()])],
            system: "s".into(),
        };
        assert!(encode_preferences(&t, &[rec], 64).is_err());
        let pair = PreferencePair {
            prompt: vec![1],
            preferred: vec![4, 2],
            dispreferred: vec![4, 2],
        };
        assert!(validate_pairs(&[pair], 8).is_err());
        assert_eq!(validate_pairs(&[], 8), Err(TrainError::EmptyBatch));
    }
}
