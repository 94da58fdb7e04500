//! Pipeline configuration: one TOML file plus environment overrides.

use std::path::{Path, PathBuf};

use qexplorer_core::datasets::{DEFAULT_SIMILARITY, DEFAULT_THRESHOLD};
use qexplorer_core::eval::Decoding;
use qexplorer_core::lm::ModelConfig;
use qexplorer_core::training::TrainConfig;
use qexplorer_core::CorpusConfig;
use serde::{Deserialize, Serialize};

use crate::Error;

pub const ENV_OUT_DIR: &str = "QEXPLORER_OUT_DIR";
pub const ENV_PORT: &str = "QEXPLORER_PORT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Reports held out for evaluation, drawn from the evaluation period.
    pub n_test: usize,
    /// Reports used to build training data, drawn from the history period.
    pub n_train: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            n_test: 402,
            n_train: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub similarity: f64,
    /// Items per concatenated sample. Kept small so a concatenation fits the
    /// model context without cutting off the items its keywords come from.
    pub max_members: usize,
    pub threshold: f64,
    /// Threshold of the ablation preference set.
    pub ablation_threshold: f64,
    /// Train the SFT stage on concatenated samples as well as single pairs.
    pub use_concat: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            similarity: DEFAULT_SIMILARITY,
            max_members: 2,
            threshold: DEFAULT_THRESHOLD,
            ablation_threshold: 0.0,
            use_concat: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_length: usize,
}

impl Default for ModelSection {
    /// Small enough that five seeds train in well under an hour on one core.
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 48,
            n_heads: 4,
            context_length: 128,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            context_length: self.context_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Also train on rendered SFT samples so the base model knows the task
    /// format, like an instruction-following base would.
    pub include_task_text: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 3e-3,
            batch_size: 16,
            include_task_text: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tfidf_top_n: usize,
    pub max_new_tokens: usize,
    /// Whether model keywords are forced to be substrings of the report.
    pub decoding: Decoding,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tfidf_top_n: 1,
            max_new_tokens: 48,
            decoding: Decoding::Free,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// `seed` and `period` are set per run.
    pub corpus: CorpusConfig,
    pub reports: ReportConfig,
    pub datasets: DatasetConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![1, 2, 3, 4, 5],
            corpus: CorpusConfig::default(),
            reports: ReportConfig::default(),
            datasets: DatasetConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            sft: TrainConfig {
                learning_rate: 3e-3,
                sft_epochs: 30,
                ..TrainConfig::default()
            },
            dpo: TrainConfig {
                learning_rate: 3e-4,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `QEXPLORER_OUT_DIR`.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.corpus.validate()?;
        if self.reports.n_test == 0 || self.reports.n_train == 0 {
            return Err(Error::Config("report counts must be > 0".into()));
        }
        let d = &self.datasets;
        if !(0.0..=1.0).contains(&d.similarity) || d.max_members < 2 {
            return Err(Error::Config(
                "dataset similarity must lie in [0, 1] and max_members be >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&d.threshold) || !(0.0..1.0).contains(&d.ablation_threshold) {
            return Err(Error::Config("dataset thresholds must lie in [0, 1)".into()));
        }
        self.model
            .with_vocab(1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.pretrain.batch_size == 0 || self.pretrain.learning_rate.is_nan() || self.pretrain.learning_rate <= 0.0 {
            return Err(Error::Config(
                "pretrain batch_size and learning_rate must be > 0".into(),
            ));
        }
        self.sft.validate()?;
        self.dpo.validate()?;
        if self.eval.max_new_tokens == 0 || self.eval.max_new_tokens >= self.model.context_length {
            return Err(Error::Config(
                "eval.max_new_tokens must lie in [1, context_length)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
