use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Padding; also the reserved id for characters outside the vocabulary.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Ends a prompt; stands for the fixed output preamble.
pub const SEP: u32 = 3;
/// Stands for the fixed instruction text that opens every prompt.
pub const INSTRUCTION: u32 = 4;
pub const SPECIAL_TOKENS: usize = 5;

/// Character vocabulary, frozen at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
    ids: BTreeMap<char, u32>,
}

impl Tokenizer {
    /// Vocabulary of every character occurring in `texts`, in code point
    /// order after the special tokens.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set.into_iter().collect())
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let ids = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + SPECIAL_TOKENS) as u32))
            .collect();
        Self { chars, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + SPECIAL_TOKENS
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c).unwrap_or(PAD)).collect()
    }

    /// Special tokens decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                (id as usize)
                    .checked_sub(SPECIAL_TOKENS)
                    .and_then(|i| self.chars.get(i))
            })
            .collect()
    }
}

impl Serialize for Tokenizer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let chars: String = self.chars.iter().collect();
        s.serialize_str(&chars)
    }
}

impl<'de> Deserialize<'de> for Tokenizer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let chars = String::deserialize(d)?;
        let list: Vec<char> = chars.chars().collect();
        if list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(serde::de::Error::custom("vocabulary must be strictly ascending"));
        }
        Ok(Self::from_chars(list))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        let t = Tokenizer::from_texts(["abc"]);
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn unknown_characters_map_to_reserved_id() {
        let t = Tokenizer::from_texts(["abc"]);
        assert_eq!(t.encode("az"), [t.id('a').unwrap(), PAD]);
        assert_eq!(t.vocab_size(), 3 + SPECIAL_TOKENS);
    }

    proptest! {
        #[test]
        fn corpus_text_round_trips(lines in prop::collection::vec("[a-z0-9 ,:.']{0,30}", 1..8)) {
            let t = Tokenizer::from_texts(lines.iter().map(String::as_str));
            for line in &lines {
                prop_assert_eq!(&t.decode(&t.encode(line)), line);
            }
        }
    }
}
