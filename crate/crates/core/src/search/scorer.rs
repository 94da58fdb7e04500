use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::corpus::Item;
use crate::text::{bigram_set, normalize};

/// Additive bigram log-odds risk model.
///
/// Each character bigram seen during fitting carries the log ratio of its
/// document frequency among toxic items to that among benign items (both
/// add-one smoothed). An item's score is the logistic of the sum over its
/// distinct bigrams; bigrams never seen in fitting contribute nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskScorer {
    log_odds: BTreeMap<String, f64>,
    fitted: bool,
}

fn key(pair: (char, char)) -> String {
    let mut s = String::new();
    s.push(pair.0);
    s.push(pair.1);
    s
}

impl RiskScorer {
    /// Fits on labeled items. Both classes must be present.
    pub fn fit<'a>(items: impl IntoIterator<Item = &'a Item>) -> Result<Self, SearchError> {
        let mut toxic_df: BTreeMap<(char, char), u32> = BTreeMap::new();
        let mut benign_df: BTreeMap<(char, char), u32> = BTreeMap::new();
        let (mut n_toxic, mut n_benign) = (0u32, 0u32);
        for item in items {
            let set = bigram_set(&normalize(&item.text));
            let (df, n) = if item.is_toxic {
                (&mut toxic_df, &mut n_toxic)
            } else {
                (&mut benign_df, &mut n_benign)
            };
            *n += 1;
            for b in set {
                *df.entry(b).or_default() += 1;
            }
        }
        if n_toxic == 0 || n_benign == 0 {
            return Err(SearchError::Config(
                "risk scorer needs both toxic and benign examples".to_string(),
            ));
        }
        let vocab: BTreeSet<(char, char)> = toxic_df.keys().chain(benign_df.keys()).copied().collect();
        let log_odds = vocab
            .into_iter()
            .map(|b| {
                let t = (*toxic_df.get(&b).unwrap_or(&0) as f64 + 1.0) / (n_toxic as f64 + 2.0);
                let n = (*benign_df.get(&b).unwrap_or(&0) as f64 + 1.0) / (n_benign as f64 + 2.0);
                (key(b), libm::log(t) - libm::log(n))
            })
            .collect();
        Ok(Self { log_odds, fitted: true })
    }

    /// Builds a fitted scorer from explicit weights.
    pub fn from_log_odds(weights: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            log_odds: weights.into_iter().collect(),
            fitted: true,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, f64)> {
        self.log_odds.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn score_text(&self, text: &str) -> Result<f64, SearchError> {
        if !self.fitted {
            return Err(SearchError::Unfitted);
        }
        let logit: f64 = bigram_set(&normalize(text))
            .into_iter()
            .filter_map(|b| self.log_odds.get(&key(b)))
            .sum();
        Ok(1.0 / (1.0 + libm::exp(-logit)))
    }

    pub fn score(&self, item: &Item) -> Result<f64, SearchError> {
        self.score_text(&item.text)
    }
}

/// Area under the ROC curve of `scores` against `labels` (ties count half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    // rank-sum with average ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += pairs[i..=j].iter().filter(|p| p.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Category, CorpusConfig};
    use alloc::vec;

    fn item(id: u64, text: &str, toxic: bool) -> Item {
        Item {
            id,
            category: Category(0),
            is_toxic: toxic,
            campaign_id: toxic.then_some(0),
            text: text.into(),
            created_at: id,
        }
    }

    #[test]
    fn unfitted_scorer_is_a_state_error() {
        let s = RiskScorer::default();
        assert_eq!(s.score(&item(0, "abcd", false)), Err(SearchError::Unfitted));
    }

    #[test]
    fn neutral_evidence_scores_one_half() {
        let s = RiskScorer::from_log_odds(vec![("ab".into(), 0.0), ("bc".into(), 0.0)]);
        assert_eq!(s.score(&item(0, "abcabc", false)).unwrap(), 0.5);
        // unseen bigrams carry no evidence either
        assert_eq!(s.score(&item(0, "xyzw", false)).unwrap(), 0.5);
    }

    #[test]
    fn scoring_is_pure_and_bounded() {
        let items = vec![
            item(0, "k7zzaa", true),
            item(1, "aabbcc", false),
            item(2, "bbccdd", false),
        ];
        let s = RiskScorer::fit(&items).unwrap();
        for it in &items {
            let a = s.score(it).unwrap();
            assert_eq!(a, s.score(it).unwrap());
            assert!((0.0..=1.0).contains(&a));
        }
        assert!(s.score(&items[0]).unwrap() > s.score(&items[1]).unwrap());
    }

    #[test]
    fn fit_requires_both_classes() {
        assert!(RiskScorer::fit(&[item(0, "abcd", false)]).is_err());
    }

    #[test]
    fn auc_of_known_rankings() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), 0.5);
    }

    #[test]
    fn held_out_auc_exceeds_threshold() {
        let seed_split = generate_corpus(&CorpusConfig {
            n_items: 3000,
            period: 1,
            ..CorpusConfig::default()
        })
        .unwrap();
        let held_out = generate_corpus(&CorpusConfig {
            n_items: 3000,
            ..CorpusConfig::default()
        })
        .unwrap();
        let scorer = RiskScorer::fit(&seed_split.items).unwrap();
        let scores: Vec<f64> = held_out.items.iter().map(|i| scorer.score(i).unwrap()).collect();
        let labels: Vec<bool> = held_out.items.iter().map(|i| i.is_toxic).collect();
        let auc = roc_auc(&scores, &labels);
        assert!(auc > 0.8, "auc {auc}");
    }
}
