//! Stage-by-stage pipeline over files, with fingerprinted resume.
//!
//! Every stage of a seed writes into `<out_dir>/seed-<n>/` and records a
//! manifest holding a key (hash of its configuration, seed and upstream
//! output digests) and the sha256 of each output. A stage whose manifest
//! key matches and whose outputs still verify is skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qexplorer_core::corpus::{Corpus, Item, Report};
use qexplorer_core::datasets::{PreferenceRecord, SftRecord};
use qexplorer_core::eval::{compare_runs, evaluate, Comparison, MetricsReport, QueryRun};
use qexplorer_core::lm::{LoraAdapter, ModelParams, Tokenizer};
use qexplorer_core::search::{InvertedIndex, Snapshot};
use qexplorer_core::training::EpochLog;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::artifacts::{check_hash, read_verified, CampaignFile, IndexFile, StageManifest, SCHEMA_VERSION};
use crate::config::PipelineConfig;
use crate::io::{read_json, read_jsonl, sha256_hex, to_json_bytes, write_json, write_jsonl};
use crate::stages;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Corpus,
    Index,
    Datasets,
    Base,
    Sft,
    Dpo,
    DpoAblation,
    Extract,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Corpus,
        Stage::Index,
        Stage::Datasets,
        Stage::Base,
        Stage::Sft,
        Stage::Dpo,
        Stage::DpoAblation,
        Stage::Extract,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Index => "index",
            Stage::Datasets => "datasets",
            Stage::Base => "base",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::DpoAblation => "dpo-ablation",
            Stage::Extract => "extract",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Corpus => &[],
            Stage::Index => &[Stage::Corpus],
            Stage::Datasets => &[Stage::Corpus, Stage::Index],
            Stage::Base => &[Stage::Corpus, Stage::Datasets],
            Stage::Sft => &[Stage::Base, Stage::Datasets],
            Stage::Dpo | Stage::DpoAblation => &[Stage::Base, Stage::Sft, Stage::Datasets],
            Stage::Extract => &[
                Stage::Corpus,
                Stage::Index,
                Stage::Base,
                Stage::Sft,
                Stage::Dpo,
                Stage::DpoAblation,
            ],
            Stage::Evaluate => &[
                Stage::Corpus,
                Stage::Index,
                Stage::Datasets,
                Stage::Dpo,
                Stage::DpoAblation,
                Stage::Extract,
            ],
        }
    }
}

/// Run names, in table order.
pub const METHODS: [&str; 5] = ["human", "tfidf", "sft", "qexplorer", "qexplorer-dcomp2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub concat: usize,
    pub preferences: usize,
    pub ablation: usize,
}

/// Everything the evaluation of one seed produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub schema_version: u32,
    pub seed: u64,
    pub datasets: DatasetStats,
    pub comparison: Comparison,
    /// Mean preference margin after each DPO epoch, epoch 0 first.
    pub dpo_margins: Vec<f64>,
    pub ablation_margins: Vec<f64>,
}

impl SeedReport {
    pub fn hit_rate(&self, method: &str) -> Option<f64> {
        self.comparison
            .rows
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.query_hit_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_seed: Vec<f64>,
    pub mean_query_hit_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub reports: Vec<SeedReport>,
}

impl Summary {
    pub fn from_reports(reports: Vec<SeedReport>) -> Self {
        let methods = METHODS
            .iter()
            .map(|&m| {
                let per_seed: Vec<f64> = reports.iter().map(|r| r.hit_rate(m).unwrap_or(0.0)).collect();
                let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
                MethodSummary {
                    method: m.into(),
                    per_seed,
                    mean_query_hit_rate: mean,
                }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: reports.iter().map(|r| r.seed).collect(),
            methods,
            reports,
        }
    }

    pub fn mean(&self, method: &str) -> Option<f64> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.mean_query_hit_rate)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<18}", "method");
        for seed in &self.seeds {
            s.push_str(&format!("  {:>8}", format!("seed {seed}")));
        }
        s.push_str(&format!("  {:>8}\n", "mean"));
        for m in &self.methods {
            s.push_str(&format!("{:<18}", m.method));
            for q in &m.per_seed {
                s.push_str(&format!("  {q:>8.3}"));
            }
            s.push_str(&format!("  {:>8.3}\n", m.mean_query_hit_rate));
        }
        s
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
}

// Identity unless the core crate is built with `f32`.
#[allow(clippy::useless_conversion)]
fn margins(logs: &[EpochLog]) -> Vec<f64> {
    logs.iter().filter_map(|l| l.margin.map(f64::from)).collect()
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, Error> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.cfg.out_dir.join(format!("seed-{seed}"))
    }

    fn manifest_path(&self, seed: u64, stage: Stage) -> PathBuf {
        self.seed_dir(seed)
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }

    /// The configuration a stage depends on.
    fn config_fragment(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Corpus => json!({ "corpus": c.corpus, "reports": c.reports }),
            Stage::Index => json!({}),
            Stage::Datasets => json!({ "datasets": c.datasets }),
            Stage::Base => json!({
                "model": c.model,
                "pretrain": c.pretrain,
                "sft": c.sft,
                "use_concat": c.datasets.use_concat,
            }),
            Stage::Sft => json!({ "sft": c.sft, "use_concat": c.datasets.use_concat }),
            Stage::Dpo | Stage::DpoAblation => json!({ "dpo": c.dpo }),
            Stage::Extract => json!({ "eval": c.eval }),
            Stage::Evaluate => json!({}),
        }
    }

    fn stage_key(&self, seed: u64, stage: Stage, inputs: &BTreeMap<&str, String>) -> String {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "stage": stage.name(),
            "seed": seed,
            "config": self.config_fragment(stage),
            "inputs": inputs,
        });
        sha256_hex(&to_json_bytes(&doc))
    }

    /// Completed manifest of `stage`, running it (and anything upstream)
    /// when missing, stale or corrupted.
    pub fn ensure(&self, seed: u64, stage: Stage) -> Result<StageManifest, Error> {
        let mut upstream = BTreeMap::new();
        for &dep in stage.deps() {
            upstream.insert(dep, self.ensure(seed, dep)?);
        }
        let inputs: BTreeMap<&str, String> = upstream.iter().map(|(s, m)| (s.name(), m.digest())).collect();
        let key = self.stage_key(seed, stage, &inputs);
        let dir = self.seed_dir(seed);
        let path = self.manifest_path(seed, stage);
        if path.exists() {
            if let Ok(m) = read_json::<StageManifest>(&path) {
                if m.key == key && m.verify(&dir) {
                    return Ok(m);
                }
            }
        }
        info!(seed, stage = stage.name(), "running stage");
        let outputs = self.run(seed, stage, &upstream).map_err(|e| e.in_stage(stage.name()))?;
        let manifest = StageManifest {
            schema_version: SCHEMA_VERSION,
            stage: stage.name().into(),
            seed,
            key,
            outputs,
        };
        write_json(&path, &manifest)?;
        Ok(manifest)
    }

    fn run(
        &self,
        seed: u64,
        stage: Stage,
        up: &BTreeMap<Stage, StageManifest>,
    ) -> Result<BTreeMap<String, String>, Error> {
        let dir = self.seed_dir(seed);
        let mut out = Outputs::new(&dir);
        match stage {
            Stage::Corpus => {
                let c = stages::gen_corpus(&self.cfg, seed)?;
                out.jsonl("corpus/eval_items.jsonl", &c.eval.items)?;
                out.jsonl("corpus/history_items.jsonl", &c.history.items)?;
                out.json(
                    "corpus/campaigns.json",
                    &CampaignFile {
                        schema_version: SCHEMA_VERSION,
                        campaigns: c.eval.campaigns.clone(),
                    },
                )?;
                out.jsonl("corpus/test_reports.jsonl", &c.test_reports)?;
                out.jsonl("corpus/train_reports.jsonl", &c.train_reports)?;
            }
            Stage::Index => {
                let c = self.load_corpus(seed, &up[&Stage::Corpus])?;
                let scorer = stages::fit_scorer(&c.history)?;
                let eval = stages::build_index(&c.eval, &scorer, &c.test_reports)?;
                let history = stages::build_index(&c.history, &scorer, &c.train_reports)?;
                out.json("index/eval_index.json", &IndexFile::from_index(&eval)?)?;
                out.json("index/history_index.json", &IndexFile::from_index(&history)?)?;
            }
            Stage::Datasets => {
                let c = self.load_corpus(seed, &up[&Stage::Corpus])?;
                let history = self.load_index(seed, &up[&Stage::Index], "history", &c.history.items)?;
                let d = stages::make_datasets(&self.cfg, &history, &c.train_reports, seed)?;
                out.jsonl("datasets/pairs.jsonl", &d.pairs)?;
                out.jsonl("datasets/concat.jsonl", &d.concat)?;
                out.jsonl("datasets/triples.jsonl", &d.preferences)?;
                out.jsonl("datasets/triples_ablation.jsonl", &d.ablation)?;
                out.jsonl("datasets/sft.jsonl", &d.sft_records(self.cfg.datasets.use_concat))?;
                out.jsonl(
                    "datasets/pref.jsonl",
                    &stages::Datasets::preference_records(&d.preferences),
                )?;
                out.jsonl(
                    "datasets/pref_ablation.jsonl",
                    &stages::Datasets::preference_records(&d.ablation),
                )?;
                out.json(
                    "datasets/stats.json",
                    &DatasetStats {
                        pairs: d.pairs.len(),
                        concat: d.concat.len(),
                        preferences: d.preferences.len(),
                        ablation: d.ablation.len(),
                    },
                )?;
            }
            Stage::Base => {
                let c = self.load_corpus(seed, &up[&Stage::Corpus])?;
                let sft: Vec<SftRecord> = self.load_jsonl(seed, &up[&Stage::Datasets], "datasets/sft.jsonl")?;
                let tok = stages::build_tokenizer(&c.history);
                let (base, logs) = stages::pretrain_base(&self.cfg, &tok, &c.history, &sft, seed, &mut |l| {
                    info!(seed, epoch = l.epoch, loss = l.loss, "pretrain");
                })?;
                out.json("models/tokenizer.json", &tok)?;
                out.json("models/base.json", &base)?;
                out.jsonl("logs/base.jsonl", &logs)?;
            }
            Stage::Sft => {
                let (tok, base) = self.load_base(seed, &up[&Stage::Base])?;
                let sft: Vec<SftRecord> = self.load_jsonl(seed, &up[&Stage::Datasets], "datasets/sft.jsonl")?;
                let r = stages::sft_stage(&self.cfg, &tok, &base, &sft, seed, &mut |l| {
                    info!(seed, epoch = l.epoch, loss = l.loss, "sft");
                })?;
                out.json("models/sft_adapter.json", &r.adapter)?;
                out.jsonl("logs/sft.jsonl", &r.logs)?;
            }
            Stage::Dpo | Stage::DpoAblation => {
                let (file, name) = match stage {
                    Stage::Dpo => ("datasets/pref.jsonl", "dpo"),
                    _ => ("datasets/pref_ablation.jsonl", "dpo_ablation"),
                };
                let (tok, base) = self.load_base(seed, &up[&Stage::Base])?;
                let sft = self.load_adapter(seed, &up[&Stage::Sft], "models/sft_adapter.json")?;
                let reference = stages::merged(&base, &sft)?;
                let records: Vec<PreferenceRecord> = self.load_jsonl(seed, &up[&Stage::Datasets], file)?;
                let r = stages::dpo_stage(&self.cfg, &tok, &reference, &records, seed, &mut |l| {
                    info!(seed, epoch = l.epoch, loss = l.loss, margin = l.margin, "dpo");
                })?;
                out.json(&format!("models/{name}_adapter.json"), &r.adapter)?;
                out.jsonl(&format!("logs/{name}.jsonl"), &r.logs)?;
            }
            Stage::Extract => {
                let c = self.load_corpus(seed, &up[&Stage::Corpus])?;
                let snapshot = self.eval_snapshot(seed, &up[&Stage::Index], &c.eval.items)?;
                let contents = stages::report_contents(&c.eval, &c.test_reports)?;
                let v = snapshot.version();
                out.json("runs/human.json", &stages::human_run(&c.test_reports, v))?;
                out.json("runs/tfidf.json", &stages::tfidf_run(&self.cfg, &c.eval, &contents, v))?;

                let (tok, base) = self.load_base(seed, &up[&Stage::Base])?;
                let sft = stages::merged(
                    &base,
                    &self.load_adapter(seed, &up[&Stage::Sft], "models/sft_adapter.json")?,
                )?;
                let models = [
                    ("sft", None),
                    ("qexplorer", Some((Stage::Dpo, "models/dpo_adapter.json"))),
                    (
                        "qexplorer-dcomp2",
                        Some((Stage::DpoAblation, "models/dpo_ablation_adapter.json")),
                    ),
                ];
                for (method, adapter) in models {
                    let params = match adapter {
                        None => sft.clone(),
                        Some((s, file)) => stages::merged(&sft, &self.load_adapter(seed, &up[&s], file)?)?,
                    };
                    let (run, raw) = stages::model_run(&self.cfg, method, &params, &tok, &contents, v)?;
                    out.json(&format!("runs/{method}.json"), &run)?;
                    out.jsonl(&format!("runs/{method}_raw.jsonl"), &raw)?;
                }
            }
            Stage::Evaluate => {
                let c = self.load_corpus(seed, &up[&Stage::Corpus])?;
                let snapshot = self.eval_snapshot(seed, &up[&Stage::Index], &c.eval.items)?;
                let mut reports: Vec<MetricsReport> = Vec::new();
                for method in METHODS {
                    let run: QueryRun = read_verified(&dir, &up[&Stage::Extract], &format!("runs/{method}.json"))?;
                    let m = evaluate(&run, &snapshot)?;
                    out.json(&format!("metrics/{method}.json"), &m)?;
                    reports.push(m);
                }
                let comparison = compare_runs(&reports)?;
                out.text("metrics/comparison.txt", &comparison.to_text())?;
                let stats: DatasetStats = read_verified(&dir, &up[&Stage::Datasets], "datasets/stats.json")?;
                let dpo: Vec<EpochLog> = self.load_jsonl(seed, &up[&Stage::Dpo], "logs/dpo.jsonl")?;
                let ablation: Vec<EpochLog> =
                    self.load_jsonl(seed, &up[&Stage::DpoAblation], "logs/dpo_ablation.jsonl")?;
                out.json(
                    "report.json",
                    &SeedReport {
                        schema_version: SCHEMA_VERSION,
                        seed,
                        datasets: stats,
                        comparison,
                        dpo_margins: margins(&dpo),
                        ablation_margins: margins(&ablation),
                    },
                )?;
            }
        }
        Ok(out.hashes)
    }

    /// Runs every stage of `seed` and returns its report.
    pub fn run_seed(&self, seed: u64) -> Result<SeedReport, Error> {
        let m = self.ensure(seed, Stage::Evaluate)?;
        read_verified(&self.seed_dir(seed), &m, "report.json")
    }

    /// Runs every configured seed and writes `summary.json` / `summary.txt`.
    pub fn run_all(&self) -> Result<Summary, Error> {
        let reports = self
            .cfg
            .seeds
            .iter()
            .map(|&s| self.run_seed(s))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = Summary::from_reports(reports);
        write_json(&self.cfg.out_dir.join("summary.json"), &summary)?;
        crate::io::write_atomic(&self.cfg.out_dir.join("summary.txt"), summary.to_text().as_bytes())?;
        Ok(summary)
    }

    fn load_jsonl<T: serde::de::DeserializeOwned>(
        &self,
        seed: u64,
        manifest: &StageManifest,
        name: &str,
    ) -> Result<Vec<T>, Error> {
        let dir = self.seed_dir(seed);
        check_hash(&dir, manifest, name)?;
        read_jsonl(&dir.join(name))
    }

    pub fn load_corpus(&self, seed: u64, manifest: &StageManifest) -> Result<stages::CorpusArtifacts, Error> {
        let dir = self.seed_dir(seed);
        let campaigns: CampaignFile = read_verified(&dir, manifest, "corpus/campaigns.json")?;
        let corpus = |file: &str, period: u32| -> Result<Corpus, Error> {
            let items: Vec<Item> = self.load_jsonl(seed, manifest, file)?;
            let mut config = self.cfg.corpus.clone();
            config.seed = seed;
            config.period = period;
            Ok(Corpus {
                config,
                campaigns: campaigns.campaigns.clone(),
                items,
            })
        };
        let test_reports: Vec<Report> = self.load_jsonl(seed, manifest, "corpus/test_reports.jsonl")?;
        let train_reports: Vec<Report> = self.load_jsonl(seed, manifest, "corpus/train_reports.jsonl")?;
        Ok(stages::CorpusArtifacts {
            eval: corpus("corpus/eval_items.jsonl", stages::EVAL_PERIOD)?,
            history: corpus("corpus/history_items.jsonl", stages::HISTORY_PERIOD)?,
            test_reports,
            train_reports,
        })
    }

    pub fn load_index(
        &self,
        seed: u64,
        manifest: &StageManifest,
        which: &str,
        items: &[Item],
    ) -> Result<InvertedIndex, Error> {
        let file: IndexFile = read_verified(&self.seed_dir(seed), manifest, &format!("index/{which}_index.json"))?;
        file.into_index(items)
    }

    fn eval_snapshot(&self, seed: u64, manifest: &StageManifest, items: &[Item]) -> Result<Snapshot, Error> {
        Ok(self.load_index(seed, manifest, "eval", items)?.snapshot())
    }

    pub fn load_base(&self, seed: u64, manifest: &StageManifest) -> Result<(Tokenizer, ModelParams), Error> {
        let dir = self.seed_dir(seed);
        let tok: Tokenizer = read_verified(&dir, manifest, "models/tokenizer.json")?;
        let base: ModelParams = read_verified(&dir, manifest, "models/base.json")?;
        base.check_shapes()?;
        Ok((tok, base))
    }

    pub fn load_adapter(&self, seed: u64, manifest: &StageManifest, name: &str) -> Result<LoraAdapter, Error> {
        read_verified(&self.seed_dir(seed), manifest, name)
    }

    /// Loads the aligned model of a finished seed: tokenizer and the base
    /// with the SFT and DPO adapters merged in.
    pub fn load_aligned(&self, seed: u64) -> Result<(Tokenizer, ModelParams), Error> {
        let (tok, base) = self.load_base(seed, &self.ensure(seed, Stage::Base)?)?;
        let sft = self.load_adapter(seed, &self.ensure(seed, Stage::Sft)?, "models/sft_adapter.json")?;
        let dpo = self.load_adapter(seed, &self.ensure(seed, Stage::Dpo)?, "models/dpo_adapter.json")?;
        Ok((tok, stages::merged(&stages::merged(&base, &sft)?, &dpo)?))
    }
}

/// Collects a stage's files and their hashes.
struct Outputs<'a> {
    dir: &'a Path,
    hashes: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            hashes: BTreeMap::new(),
        }
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        let h = write_json(&self.dir.join(name), value)?;
        self.hashes.insert(name.into(), h);
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), Error> {
        let h = write_jsonl(&self.dir.join(name), rows)?;
        self.hashes.insert(name.into(), h);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), Error> {
        crate::io::write_atomic(&self.dir.join(name), text.as_bytes())?;
        self.hashes.insert(name.into(), sha256_hex(text.as_bytes()));
        Ok(())
    }
}
