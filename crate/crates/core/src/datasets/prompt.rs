//! Instruction and preference prompt formats.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{AnnotatedPair, ConcatSample, DatasetError, PreferenceTriple};

pub const SYSTEM_PROMPT: &str = "You are a content safety expert and need to extract key words from the improper item's information to help detect more similar risks, focusing on the unique information related to the violations.";

pub const QUESTION_PREFIX: &str = "The improper information is as follows: ";

/// Every target output starts with this preamble; keywords follow,
/// comma-separated.
pub const OUTPUT_PREFIX: &str =
    "The collection of the extracted keywords for risk exploration is as follows, separated by commas: ";

/// Instruction field of an SFT record.
pub fn instruction() -> String {
    let mut s = String::from(SYSTEM_PROMPT);
    s.push(' ');
    s.push_str(QUESTION_PREFIX.trim_end());
    s
}

/// Model input for a piece of content: instruction and input joined by a
/// space. Identical to `system + " " + question` of a preference record.
pub fn model_prompt(content: &str) -> String {
    let mut s = instruction();
    s.push(' ');
    s.push_str(content);
    s
}

pub fn render_output(keywords: &[String]) -> String {
    let mut s = String::from(OUTPUT_PREFIX);
    s.push_str(&keywords.join(","));
    s
}

/// Parses a model or dataset output. `None` when the preamble is missing.
/// Queries are split on commas, trimmed, and deduplicated in order; empty
/// queries are dropped.
pub fn parse_output(text: &str) -> Option<Vec<String>> {
    let rest = text.strip_prefix(OUTPUT_PREFIX)?;
    let mut out: Vec<String> = Vec::new();
    for q in rest.split(',').map(str::trim).filter(|q| !q.is_empty()) {
        if !out.iter().any(|o| o == q) {
            out.push(q.into());
        }
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub question: String,
    /// `[preferred, dispreferred]`.
    pub answer: [String; 2],
    pub system: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptRecord {
    Sft(SftRecord),
    Preference(PreferenceRecord),
}

impl SftRecord {
    pub fn new(content: &str, keywords: &[String]) -> Self {
        Self {
            instruction: instruction(),
            input: content.into(),
            output: render_output(keywords),
        }
    }

    pub fn prompt(&self) -> String {
        let mut s = self.instruction.clone();
        s.push(' ');
        s.push_str(&self.input);
        s
    }

    /// Recovers `(content, keywords)`.
    pub fn parse(&self) -> Result<(String, Vec<String>), DatasetError> {
        let keywords = parse_output(&self.output).ok_or(DatasetError::Format("output preamble"))?;
        Ok((self.input.clone(), keywords))
    }
}

impl PreferenceRecord {
    pub fn prompt(&self) -> String {
        let mut s = self.system.clone();
        s.push(' ');
        s.push_str(&self.question);
        s
    }

    pub fn parse(&self) -> Result<PreferenceTriple, DatasetError> {
        let content = self
            .question
            .strip_prefix(QUESTION_PREFIX)
            .ok_or(DatasetError::Format("question preamble"))?;
        let preferred = parse_output(&self.answer[0]).ok_or(DatasetError::Format("answer preamble"))?;
        let dispreferred = parse_output(&self.answer[1]).ok_or(DatasetError::Format("answer preamble"))?;
        Ok(PreferenceTriple {
            content: content.into(),
            preferred,
            dispreferred,
        })
    }
}

pub fn render_pair(pair: &AnnotatedPair) -> SftRecord {
    SftRecord::new(&pair.content, core::slice::from_ref(&pair.keyword))
}

pub fn render_concat(sample: &ConcatSample) -> SftRecord {
    SftRecord::new(&sample.content, &sample.keywords)
}

pub fn render_preference(triple: &PreferenceTriple) -> PreferenceRecord {
    let mut question = String::from(QUESTION_PREFIX);
    question.push_str(&triple.content);
    PreferenceRecord {
        question,
        answer: [render_output(&triple.preferred), render_output(&triple.dispreferred)],
        system: SYSTEM_PROMPT.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn pair_output_is_prefix_plus_keyword() {
        let pair = AnnotatedPair {
            item_id: 0,
            category: crate::corpus::Category(0),
            content: "zzk7qq".into(),
            keyword: "k7".into(),
            hit: 3,
            length: 2,
        };
        let rec = render_pair(&pair);
        assert_eq!(rec.output, alloc::format!("{OUTPUT_PREFIX}k7"));
        assert!(rec.instruction.starts_with("You are a content safety expert"));
    }

    #[test]
    fn preference_answer_is_ordered() {
        let t = PreferenceTriple {
            content: "abc".into(),
            preferred: vec!["p1".into(), "p2".into()],
            dispreferred: vec!["d1".into()],
        };
        let rec = render_preference(&t);
        assert!(rec.answer[0].ends_with("p1,p2"));
        assert!(rec.answer[1].ends_with("d1"));
        assert_eq!(rec.prompt(), model_prompt("abc"));
    }

    #[test]
    fn output_parsing() {
        assert_eq!(parse_output(OUTPUT_PREFIX), Some(vec![]));
        let text = alloc::format!("{OUTPUT_PREFIX}a,b,a");
        assert_eq!(parse_output(&text), Some(vec!["a".into(), "b".into()]));
        let text = alloc::format!("{OUTPUT_PREFIX} a , ,b");
        assert_eq!(parse_output(&text), Some(vec!["a".into(), "b".into()]));
        assert_eq!(parse_output("garbage"), None);
    }

    fn keyword() -> impl Strategy<Value = String> {
        "[a-z0-9]{1,8}"
    }

    proptest! {
        #[test]
        fn preference_records_round_trip(
            content in "[a-z0-9,]{0,40}",
            pre in prop::collection::btree_set(keyword(), 1..4),
            dis in prop::collection::btree_set(keyword(), 1..4),
        ) {
            let t = PreferenceTriple {
                content,
                preferred: pre.into_iter().collect(),
                dispreferred: dis.into_iter().collect(),
            };
            prop_assert_eq!(render_preference(&t).parse().unwrap(), t);
        }

        #[test]
        fn sft_records_round_trip(
            content in "[a-z0-9,]{0,40}",
            kws in prop::collection::btree_set(keyword(), 0..4),
        ) {
            let kws: Vec<String> = kws.into_iter().collect();
            let rec = SftRecord::new(&content, &kws);
            prop_assert_eq!(rec.parse().unwrap(), (content, kws));
        }
    }
}
