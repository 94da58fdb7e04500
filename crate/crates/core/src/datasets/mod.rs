//! Training data built from reports and search feedback.
//!
//! * `D`: `(content, keyword)` pairs admitted by the length/hit rule.
//! * `D_cat`: concatenations of similar items, at most 20 per sample.
//! * `D_comp`: per-cluster keyword sets split by observed toxic rate.

pub mod prompt;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use alloc::vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, Report, SHORT_PHRASE_MAX};
use crate::rng::{mix, stream, stream_rng};
use crate::search::{SearchError, Snapshot, DEFAULT_LIMIT};
use crate::text::{bigram_set, char_len, jaccard, normalize};

pub use prompt::{PreferenceRecord, PromptRecord, SftRecord};

/// Minimum Jaccard similarity of content bigram sets for two pairs to be
/// linked into the same group.
pub const DEFAULT_SIMILARITY: f64 = 0.4;
pub const DEFAULT_MAX_MEMBERS: usize = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("report references unknown item {0}")]
    UnknownItem(u64),
    #[error("search failed: {0}")]
    Search(#[from] SearchError),
    #[error("malformed record: missing {0}")]
    Format(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub item_id: u64,
    pub category: Category,
    pub content: String,
    pub keyword: String,
    pub hit: usize,
    /// Character count of `keyword`.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: usize,
    pub category: Category,
    pub members: Vec<AnnotatedPair>,
}

impl Group {
    /// Distinct items in member order, each with its keywords.
    fn items(&self) -> Vec<(u64, &str, Vec<&str>)> {
        let mut out: Vec<(u64, &str, Vec<&str>)> = Vec::new();
        for m in &self.members {
            match out.iter_mut().find(|e| e.0 == m.item_id) {
                Some(entry) => entry.2.push(&m.keyword),
                None => out.push((m.item_id, &m.content, alloc::vec![m.keyword.as_str()])),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatSample {
    pub item_ids: Vec<u64>,
    /// Member contents joined with commas.
    pub content: String,
    /// Distinct member keywords in content order.
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub content: String,
    pub preferred: Vec<String>,
    pub dispreferred: Vec<String>,
}

/// Admission rule for `D`: at least two characters, and either some exposure
/// or at most ten characters.
pub fn admits(length: usize, hit: usize) -> bool {
    length >= 2 && (hit > 0 || length <= SHORT_PHRASE_MAX)
}

/// Builds `D` from annotated reports, with `hit` measured on `snapshot`.
pub fn build_sft_dataset(reports: &[Report], snapshot: &Snapshot) -> Result<Vec<AnnotatedPair>, DatasetError> {
    let mut out = Vec::new();
    for report in reports {
        let item = snapshot
            .item(report.item_id)
            .ok_or(DatasetError::UnknownItem(report.item_id))?;
        for keyword in &report.oracle_keywords {
            let length = char_len(keyword);
            if length < 2 {
                continue;
            }
            let hit = snapshot.feedback_stats(keyword, DEFAULT_LIMIT)?.hit;
            if admits(length, hit) {
                out.push(AnnotatedPair {
                    item_id: item.id,
                    category: item.category,
                    content: item.text.clone(),
                    keyword: keyword.clone(),
                    hit,
                    length,
                });
            }
        }
    }
    Ok(out)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so roots are first members
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clustering within category: pairs are linked when the
/// Jaccard similarity of their content bigram sets is at least `similarity`.
/// Groups are ordered by first member; members keep input order.
pub fn cluster_groups(pairs: &[AnnotatedPair], similarity: f64) -> Vec<Group> {
    let grams: Vec<BTreeSet<(char, char)>> = pairs.iter().map(|p| bigram_set(&normalize(&p.content))).collect();
    let mut sets = DisjointSet::new(pairs.len());
    let mut by_category: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_category.entry(p.category).or_default().push(i);
    }
    for members in by_category.values() {
        for (a_pos, &a) in members.iter().enumerate() {
            for &b in &members[a_pos + 1..] {
                if sets.find(a) == sets.find(b) {
                    continue;
                }
                if pairs[a].content == pairs[b].content || jaccard(&grams[a], &grams[b]) >= similarity {
                    sets.union(a, b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<AnnotatedPair>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let root = sets.find(i);
        groups.entry(root).or_default().push(p.clone());
    }
    groups
        .into_values()
        .enumerate()
        .map(|(group_id, members)| Group {
            group_id,
            category: members[0].category,
            members,
        })
        .collect()
}

type Sampled<'g> = Vec<(u64, &'g str, Vec<&'g str>)>;

/// Splits a group's distinct items into chunks of at most `max_members`,
/// after a seeded shuffle. Chunk sizes differ by at most one; items keep
/// member order within a chunk. Groups with fewer than two items yield none.
fn chunk_items<'g>(group: &'g Group, max_members: usize, seed: u64) -> Vec<Sampled<'g>> {
    let items = group.items();
    if items.len() < 2 || max_members < 2 {
        return Vec::new();
    }
    let n_chunks = items.len().div_ceil(max_members);
    let mut rng = stream_rng(mix(seed, group.group_id as u64), stream::CONCAT);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut chunks: Vec<Vec<usize>> = vec![Vec::new(); n_chunks];
    for (k, &i) in order.iter().enumerate() {
        chunks[k % n_chunks].push(i);
    }
    let mut items = items.into_iter().map(Some).collect::<Vec<_>>();
    chunks
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            c.into_iter().filter_map(|i| items[i].take()).collect()
        })
        .collect()
}

fn dedup_keywords<'a>(sampled: &[(u64, &'a str, Vec<&'a str>)]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (_, _, kws) in sampled {
        for &k in kws {
            if !out.iter().any(|o| o == k) {
                out.push(k.into());
            }
        }
    }
    out
}

fn join_contents(sampled: &[(u64, &str, Vec<&str>)]) -> String {
    sampled.iter().map(|s| s.1).collect::<Vec<_>>().join(",")
}

/// Builds `D_cat`: one concatenated sample per chunk of at most
/// `max_members` distinct items of a group.
pub fn build_concat_dataset(groups: &[Group], max_members: usize, seed: u64) -> Vec<ConcatSample> {
    groups
        .iter()
        .flat_map(|g| chunk_items(g, max_members, seed))
        .map(|sampled| ConcatSample {
            item_ids: sampled.iter().map(|s| s.0).collect(),
            content: join_contents(&sampled),
            keywords: dedup_keywords(&sampled),
        })
        .collect()
}

/// Builds `D_comp` over the same samples as [`build_concat_dataset`]. A
/// keyword whose toxic rate on `snapshot` exceeds `threshold` is preferred;
/// at or below it, dispreferred. Groups need two candidate keywords and a
/// non-empty side on both ends.
pub fn build_preference_dataset(
    groups: &[Group],
    snapshot: &Snapshot,
    threshold: f64,
    max_members: usize,
    seed: u64,
) -> Result<Vec<PreferenceTriple>, DatasetError> {
    let mut out = Vec::new();
    for sampled in groups.iter().flat_map(|g| chunk_items(g, max_members, seed)) {
        let candidates = dedup_keywords(&sampled);
        if candidates.len() < 2 {
            continue;
        }
        let (mut preferred, mut dispreferred) = (Vec::new(), Vec::new());
        for k in candidates {
            if snapshot.feedback_stats(&k, DEFAULT_LIMIT)?.toxic_rate > threshold {
                preferred.push(k);
            } else {
                dispreferred.push(k);
            }
        }
        if !preferred.is_empty() && !dispreferred.is_empty() {
            out.push(PreferenceTriple {
                content: join_contents(&sampled),
                preferred,
                dispreferred,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, Item};
    use crate::search::{InvertedIndex, RiskScorer};
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

    fn pair(item_id: u64, content: &str, keyword: &str) -> AnnotatedPair {
        AnnotatedPair {
            item_id,
            category: Category(0),
            content: content.into(),
            keyword: keyword.into(),
            hit: 1,
            length: keyword.chars().count(),
        }
    }

    fn snapshot(items: Vec<Item>) -> Snapshot {
        let mut idx = InvertedIndex::build(items).unwrap();
        idx.attach_scorer(RiskScorer::from_log_odds(vec![])).unwrap();
        idx.snapshot()
    }

    #[test]
    fn admission_rule() {
        assert!(!admits(1, 5));
        assert!(!admits(0, 0));
        assert!(admits(2, 0));
        assert!(admits(10, 0));
        assert!(!admits(12, 0));
        assert!(admits(12, 3));
    }

    #[test]
    fn sft_dataset_filters_by_length_and_hits() {
        let long_hit = "abcdefghijkl"; // 12 chars, present in item 1
        let snap = snapshot(vec![item(0, "zzqqk7", true), item(1, "abcdefghijklmn", false)]);
        let reports = vec![Report {
            item_id: 0,
            oracle_keywords: vec!["k".into(), "k7".into(), "mnopqrstuvwx".into(), long_hit.into()],
            tick: 0,
        }];
        let d = build_sft_dataset(&reports, &snap).unwrap();
        let kws: Vec<&str> = d.iter().map(|p| p.keyword.as_str()).collect();
        assert_eq!(kws, ["k7", long_hit]);
        assert_eq!(d[1].hit, 1);
        assert_eq!(d[1].length, 12);

        let unknown = vec![Report {
            item_id: 42,
            oracle_keywords: vec![],
            tick: 0,
        }];
        assert_eq!(build_sft_dataset(&unknown, &snap), Err(DatasetError::UnknownItem(42)));
    }

    #[test]
    fn clustering_edge_cases() {
        let same = vec![pair(0, "abcdef", "ab"), pair(1, "abcdef", "cd")];
        assert_eq!(cluster_groups(&same, 0.4).len(), 1);
        let disjoint = vec![pair(0, "abcdef", "ab"), pair(1, "uvwxyz", "uv")];
        assert_eq!(cluster_groups(&disjoint, 0.4).len(), 2);
        let mut other_cat = pair(1, "abcdef", "cd");
        other_cat.category = Category(1);
        assert_eq!(cluster_groups(&[pair(0, "abcdef", "ab"), other_cat], 0.4).len(), 2);
    }

    fn group_of(n: usize) -> Group {
        Group {
            group_id: 0,
            category: Category(0),
            members: (0..n)
                .map(|i| pair(i as u64, &alloc::format!("c{i}"), &alloc::format!("k{i}")))
                .collect(),
        }
    }

    #[test]
    fn concat_sizes() {
        assert!(build_concat_dataset(&[group_of(1)], 20, 0).is_empty());
        let s = build_concat_dataset(&[group_of(25)], 20, 0);
        assert_eq!(s.len(), 2);
        let mut sizes: Vec<usize> = s.iter().map(|c| c.item_ids.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![12, 13]);
        for c in &s {
            assert_eq!(c.content.split(',').count(), c.item_ids.len());
            // member order is preserved
            assert!(c.item_ids.windows(2).all(|w| w[0] < w[1]));
        }
        let mut all: Vec<u64> = s.iter().flat_map(|c| c.item_ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<u64>>());
        assert_eq!(build_concat_dataset(&[group_of(40)], 20, 0).len(), 2);
    }

    #[test]
    fn concat_counts_distinct_items() {
        // two keywords on one item are not two members
        let g = Group {
            group_id: 0,
            category: Category(0),
            members: vec![pair(0, "abc", "ab"), pair(0, "abc", "bc")],
        };
        assert!(build_concat_dataset(&[g], 20, 0).is_empty());
    }

    #[test]
    fn preference_boundary_is_on_dispreferred_side() {
        // "k7" is toxic in 6 of 100 exposed items, "q9" in 5 of 100
        let mut items = Vec::new();
        for i in 0..100u64 {
            items.push(item(i, &alloc::format!("k7aa{i}"), i < 6));
        }
        for i in 100..200u64 {
            items.push(item(i, &alloc::format!("q9bb{i}"), i < 105));
        }
        let snap = snapshot(items);
        assert!((snap.feedback_stats("k7", 100).unwrap().toxic_rate - 0.06).abs() < 1e-12);
        assert!((snap.feedback_stats("q9", 100).unwrap().toxic_rate - 0.05).abs() < 1e-12);
        let g = Group {
            group_id: 0,
            category: Category(0),
            members: vec![pair(0, "k7aa0", "k7"), pair(100, "q9bb100", "q9")],
        };
        let t = build_preference_dataset(core::slice::from_ref(&g), &snap, 0.05, 20, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].preferred, ["k7"]);
        assert_eq!(t[0].dispreferred, ["q9"]);
        // at threshold 0 both are preferred, leaving no ordering
        assert!(build_preference_dataset(&[g], &snap, 0.0, 20, 0).unwrap().is_empty());
    }

    #[test]
    fn all_zero_rates_are_skipped() {
        let snap = snapshot(vec![item(0, "aabb", false), item(1, "ccdd", false)]);
        let g = Group {
            group_id: 0,
            category: Category(0),
            members: vec![pair(0, "aabb", "aa"), pair(1, "ccdd", "cc")],
        };
        assert!(build_preference_dataset(&[g], &snap, 0.05, 20, 0).unwrap().is_empty());
    }
}
