//! On-disk artifact formats.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use qexplorer_core::corpus::{Campaign, Item};
use qexplorer_core::search::{InvertedIndex, RiskScorer};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, sha256_file, sha256_hex, to_json_bytes};
use crate::Error;

/// Bumped whenever a persisted format changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

/// Persisted inverted index: postings keyed by bigram, ranking model,
/// tombstones and the version they produce. Items live in the corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub schema_version: u32,
    pub version: u64,
    pub scorer: RiskScorer,
    pub tombstones: Vec<u64>,
    pub postings: BTreeMap<String, Vec<u64>>,
}

impl IndexFile {
    pub fn from_index(index: &InvertedIndex) -> Result<Self, Error> {
        let scorer = index
            .scorer()
            .cloned()
            .ok_or_else(|| Error::Integrity("index has no ranking model".into()))?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            version: index.version(),
            scorer,
            tombstones: index.tombstones().iter().copied().collect(),
            postings: index
                .postings()
                .map(|(&(a, b), ids)| ([a, b].iter().collect(), ids.to_vec()))
                .collect(),
        })
    }

    /// Rebuilds the index over `items`, verifying the postings.
    pub fn into_index(self, items: &[Item]) -> Result<InvertedIndex, Error> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported index schema {}",
                self.schema_version
            )));
        }
        let mut postings = BTreeMap::new();
        for (key, ids) in self.postings {
            let mut chars = key.chars();
            match (chars.next(), chars.next(), chars.next()) {
                (Some(a), Some(b), None) => {
                    postings.insert((a, b), ids);
                }
                _ => return Err(Error::Integrity(format!("posting key {key:?} is not a bigram"))),
            }
        }
        let tombstones: BTreeSet<u64> = self.tombstones.into_iter().collect();
        Ok(InvertedIndex::from_parts(
            items.to_vec(),
            postings,
            Some(self.scorer),
            tombstones,
            self.version,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignFile {
    pub schema_version: u32,
    pub campaigns: Vec<Campaign>,
}

/// Record of a completed stage. `key` fingerprints the stage's
/// configuration and inputs; `outputs` maps file names (relative to the
/// seed directory) to their sha256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub stage: String,
    pub seed: u64,
    pub key: String,
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    /// Fingerprint of the outputs, used as an input key downstream.
    pub fn digest(&self) -> String {
        sha256_hex(&to_json_bytes(&self.outputs))
    }

    /// True when every output still hashes to its recorded value.
    pub fn verify(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(name, hash)| sha256_file(&dir.join(name)).is_ok_and(|h| h == *hash))
    }

    pub fn output_hash(&self, name: &str) -> Result<&str, Error> {
        self.outputs
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("stage {} has no output {name}", self.stage)))
    }
}

/// Reads a JSON artifact after checking it against the hash recorded by
/// the stage that wrote it.
pub fn read_verified<T: serde::de::DeserializeOwned>(
    dir: &Path,
    manifest: &StageManifest,
    name: &str,
) -> Result<T, Error> {
    check_hash(dir, manifest, name)?;
    read_json(&dir.join(name))
}

pub fn check_hash(dir: &Path, manifest: &StageManifest, name: &str) -> Result<(), Error> {
    let expected = manifest.output_hash(name)?;
    let actual = sha256_file(&dir.join(name))?;
    if actual != expected {
        return Err(Error::Integrity(format!(
            "{name} hashes to {actual}, manifest of stage {} records {expected}",
            manifest.stage
        )));
    }
    Ok(())
}
