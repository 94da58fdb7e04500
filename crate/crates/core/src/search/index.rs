use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{RiskScorer, SearchError};
use crate::corpus::Item;
use crate::text::{bigrams, normalize};

pub type Bigram = (char, char);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query: String,
    pub ranked_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub snapshot_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStats {
    pub keyword: String,
    pub hit: usize,
    pub toxic_rate: f64,
}

/// Immutable state shared between the live index and its snapshots. Only the
/// tombstone set and the version differ between views.
#[derive(Debug)]
struct Shared {
    postings: BTreeMap<Bigram, Vec<u64>>,
    /// Sorted by id.
    docs: Vec<Item>,
    normalized: Vec<String>,
}

#[derive(Clone, Debug)]
struct View {
    shared: Arc<Shared>,
    scorer: Option<Arc<RiskScorer>>,
    scores: Option<Arc<Vec<f64>>>,
    tombstones: Arc<BTreeSet<u64>>,
    version: u64,
}

/// The live, mutable index.
#[derive(Clone, Debug)]
pub struct InvertedIndex {
    view: View,
}

/// A frozen read-only view pinned to the version at which it was taken.
#[derive(Clone, Debug)]
pub struct Snapshot {
    view: View,
}

pub fn build_index(items: &[Item]) -> Result<InvertedIndex, SearchError> {
    InvertedIndex::build(items.iter().cloned())
}

fn intersect_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

impl View {
    fn position(&self, id: u64) -> Option<usize> {
        self.shared.docs.binary_search_by_key(&id, |d| d.id).ok()
    }

    fn candidates(&self, query: &str) -> Vec<u64> {
        let postings = &self.shared.postings;
        let mut chars = query.chars();
        let first = chars.next();
        if chars.next().is_none() {
            // single character: every document containing it has a bigram
            // that starts or ends with it
            let c = first.unwrap();
            let mut ids = BTreeSet::new();
            for (pair, list) in postings.iter() {
                if pair.0 == c || pair.1 == c {
                    ids.extend(list.iter().copied());
                }
            }
            return ids.into_iter().collect();
        }
        let grams: BTreeSet<Bigram> = bigrams(query).collect();
        let mut lists: Vec<&Vec<u64>> = Vec::with_capacity(grams.len());
        for g in &grams {
            match postings.get(g) {
                Some(list) => lists.push(list),
                None => return Vec::new(),
            }
        }
        lists.sort_by_key(|l| l.len());
        let mut acc = lists[0].clone();
        for list in &lists[1..] {
            if acc.is_empty() {
                break;
            }
            acc = intersect_sorted(&acc, list);
        }
        acc
    }

    fn search(&self, query: &str, limit: usize) -> Result<SearchResult, SearchError> {
        if limit == 0 {
            return Err(SearchError::Validation("limit must be >= 1".to_string()));
        }
        let q = normalize(query);
        if q.is_empty() {
            return Err(SearchError::Validation("query must not be empty".to_string()));
        }
        let scores = self.scores.as_ref().ok_or(SearchError::Unfitted)?;
        let mut hits: Vec<(f64, u64)> = self
            .candidates(&q)
            .into_iter()
            .filter(|id| !self.tombstones.contains(id))
            .filter_map(|id| {
                let pos = self.position(id)?;
                self.shared.normalized[pos]
                    .contains(q.as_str())
                    .then(|| (scores[pos], id))
            })
            .collect();
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        hits.truncate(limit);
        Ok(SearchResult {
            query: query.to_string(),
            ranked_ids: hits.iter().map(|h| h.1).collect(),
            scores: hits.iter().map(|h| h.0).collect(),
            snapshot_version: self.version,
        })
    }

    fn feedback_stats(&self, keyword: &str, limit: usize) -> Result<FeedbackStats, SearchError> {
        let result = self.search(keyword, limit)?;
        let hit = result.ranked_ids.len();
        let toxic = result
            .ranked_ids
            .iter()
            .filter(|&&id| self.item(id).is_some_and(|i| i.is_toxic))
            .count();
        Ok(FeedbackStats {
            keyword: keyword.to_string(),
            hit,
            toxic_rate: if hit > 0 { toxic as f64 / hit as f64 } else { 0.0 },
        })
    }

    fn item(&self, id: u64) -> Option<&Item> {
        self.position(id).map(|p| &self.shared.docs[p])
    }
}

macro_rules! read_api {
    () => {
        /// Exact-substring search ranked by risk score.
        pub fn search(&self, query: &str, limit: usize) -> Result<SearchResult, SearchError> {
            self.view.search(query, limit)
        }

        /// Exposure count and toxic rate over the top `limit` results.
        pub fn feedback_stats(&self, keyword: &str, limit: usize) -> Result<FeedbackStats, SearchError> {
            self.view.feedback_stats(keyword, limit)
        }

        /// Looks up a document, removed or not.
        pub fn item(&self, id: u64) -> Option<&Item> {
            self.view.item(id)
        }

        pub fn version(&self) -> u64 {
            self.view.version
        }

        pub fn is_removed(&self, id: u64) -> bool {
            self.view.tombstones.contains(&id)
        }

        pub fn tombstones(&self) -> &BTreeSet<u64> {
            &self.view.tombstones
        }

        pub fn docs(&self) -> &[Item] {
            &self.view.shared.docs
        }

        pub fn postings(&self) -> impl Iterator<Item = (&Bigram, &[u64])> {
            self.view.shared.postings.iter().map(|(k, v)| (k, v.as_slice()))
        }

        pub fn scorer(&self) -> Option<&RiskScorer> {
            self.view.scorer.as_deref()
        }

        /// Risk score of a document as used for ranking.
        pub fn risk_score(&self, id: u64) -> Result<f64, SearchError> {
            let scores = self.view.scores.as_ref().ok_or(SearchError::Unfitted)?;
            let pos = self.view.position(id).ok_or(SearchError::NotFound(id))?;
            Ok(scores[pos])
        }
    };
}

impl InvertedIndex {
    /// Indexes every character bigram of every normalized document.
    pub fn build(items: impl IntoIterator<Item = Item>) -> Result<Self, SearchError> {
        let mut docs: Vec<Item> = items.into_iter().collect();
        if docs.is_empty() {
            return Err(SearchError::Config("corpus is empty".to_string()));
        }
        docs.sort_by_key(|d| d.id);
        if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(SearchError::Config(format!("duplicate item id {}", w[0].id)));
        }
        let normalized: Vec<String> = docs.iter().map(|d| normalize(&d.text)).collect();
        let mut postings: BTreeMap<Bigram, Vec<u64>> = BTreeMap::new();
        for (doc, text) in docs.iter().zip(&normalized) {
            for gram in bigrams(text) {
                let list = postings.entry(gram).or_default();
                // ids arrive in ascending order, so only the tail can repeat
                if list.last() != Some(&doc.id) {
                    list.push(doc.id);
                }
            }
        }
        Ok(Self {
            view: View {
                shared: Arc::new(Shared {
                    postings,
                    docs,
                    normalized,
                }),
                scorer: None,
                scores: None,
                tombstones: Arc::new(BTreeSet::new()),
                version: 0,
            },
        })
    }

    /// Reassembles an index from persisted parts, checking every invariant.
    pub fn from_parts(
        docs: Vec<Item>,
        postings: BTreeMap<Bigram, Vec<u64>>,
        scorer: Option<RiskScorer>,
        tombstones: BTreeSet<u64>,
        version: u64,
    ) -> Result<Self, SearchError> {
        let mut index = Self::build(docs)?;
        if index.view.shared.postings != postings {
            return Err(SearchError::Config(
                "postings do not match the document store".to_string(),
            ));
        }
        if let Some(id) = tombstones.iter().find(|&&id| index.view.position(id).is_none()) {
            return Err(SearchError::Config(format!("tombstone {id} is not a document")));
        }
        if let Some(s) = scorer {
            index.set_scorer(s)?;
        }
        index.view.tombstones = Arc::new(tombstones);
        index.view.version = version;
        Ok(index)
    }

    fn set_scorer(&mut self, scorer: RiskScorer) -> Result<(), SearchError> {
        let scores = self
            .view
            .shared
            .docs
            .iter()
            .map(|d| scorer.score(d))
            .collect::<Result<Vec<f64>, _>>()?;
        self.view.scorer = Some(Arc::new(scorer));
        self.view.scores = Some(Arc::new(scores));
        Ok(())
    }

    /// Attaches the ranking model. Counts as a mutation.
    pub fn attach_scorer(&mut self, scorer: RiskScorer) -> Result<u64, SearchError> {
        self.set_scorer(scorer)?;
        self.view.version += 1;
        Ok(self.view.version)
    }

    /// Tombstones `id`. Removing an already removed item is a no-op that
    /// leaves the version unchanged.
    pub fn remove_item(&mut self, id: u64) -> Result<u64, SearchError> {
        if self.view.position(id).is_none() {
            return Err(SearchError::NotFound(id));
        }
        if !self.view.tombstones.contains(&id) {
            Arc::make_mut(&mut self.view.tombstones).insert(id);
            self.view.version += 1;
        }
        Ok(self.view.version)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            view: self.view.clone(),
        }
    }

    read_api!();
}

impl Snapshot {
    read_api!();
}
