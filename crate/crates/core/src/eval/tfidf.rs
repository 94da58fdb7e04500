use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{QueryRun, ReportQueries};
use crate::text::normalize;

pub const MIN_N: usize = 2;
pub const MAX_N: usize = 4;

/// Character n-gram document frequencies over a corpus.
#[derive(Clone, Debug, Default)]
pub struct TfIdf {
    df: BTreeMap<String, usize>,
    n_docs: usize,
}

/// Every character 2- to 4-gram of the normalised text, by position, that
/// neither starts nor ends with a space.
fn terms(text: &str) -> Vec<String> {
    let chars: Vec<char> = normalize(text).chars().collect();
    let mut out = Vec::new();
    for n in MIN_N..=MAX_N {
        for w in chars.windows(n) {
            if w[0] != ' ' && w[n - 1] != ' ' {
                out.push(w.iter().collect());
            }
        }
    }
    out
}

impl TfIdf {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            let mut t = terms(doc);
            t.sort_unstable();
            t.dedup();
            for term in t {
                *df.entry(term).or_default() += 1;
            }
        }
        Self { df, n_docs }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// `ln(N / df)`; terms absent from the corpus are treated as `df = 1`.
    pub fn idf(&self, term: &str) -> f64 {
        libm::log(self.n_docs.max(1) as f64 / self.df(term).max(1) as f64)
    }

    /// All distinct terms of `text` with `tf · idf`, best first, ties broken
    /// lexicographically.
    pub fn scores(&self, text: &str) -> Vec<(String, f64)> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in terms(text) {
            *tf.entry(t).or_default() += 1;
        }
        let mut out: Vec<(String, f64)> = tf
            .into_iter()
            .map(|(t, c)| {
                let s = c as f64 * self.idf(&t);
                (t, s)
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    pub fn top_terms(&self, text: &str, top_n: usize) -> Vec<String> {
        self.scores(text).into_iter().take(top_n).map(|(t, _)| t).collect()
    }
}

/// Baseline run: the `top_n` highest tf-idf terms of each report.
pub fn extract_queries_tfidf(model: &TfIdf, reports: &[(u64, &str)], top_n: usize, snapshot_version: u64) -> QueryRun {
    QueryRun {
        method: "tfidf".into(),
        snapshot_version,
        reports: reports
            .iter()
            .map(|&(report_id, content)| ReportQueries {
                report_id,
                queries: model.top_terms(content, top_n),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terms_skip_space_edges() {
        let t = terms("ab c");
        assert!(t.contains(&"ab".into()));
        assert!(t.contains(&"b c".into()));
        assert!(!t.iter().any(|x| x.starts_with(' ') || x.ends_with(' ')));
    }

    #[test]
    fn unique_term_has_maximal_idf() {
        let m = TfIdf::fit(["xa yb", "xa zz", "xa qq"]);
        assert_eq!(m.idf("xa"), 0.0);
        assert!((m.idf("qq") - libm::log(3.0)).abs() < 1e-15);
        assert_eq!(m.idf("never"), m.idf("qq"));
    }
}
