//! In-memory computation of every pipeline stage for one seed.

use qexplorer_core::corpus::{generate_corpus, sample_reports, Corpus, Report};
use qexplorer_core::datasets::prompt::{
    model_prompt, render_concat, render_pair, render_preference, OUTPUT_PREFIX, SYSTEM_PROMPT,
};
use qexplorer_core::datasets::{
    build_concat_dataset, build_preference_dataset, build_sft_dataset, cluster_groups, AnnotatedPair, ConcatSample,
    PreferenceRecord, PreferenceTriple, SftRecord,
};
use qexplorer_core::eval::{extract_queries_model, extract_queries_tfidf, QueryRun, ReportQueries, TfIdf};
use qexplorer_core::lm::{
    merge_adapter, DecodeMode, GenerationConfig, LoraAdapter, ModelParams, Sequence, Tokenizer, BOS, EOS,
};
use qexplorer_core::rng::mix;
use qexplorer_core::search::{InvertedIndex, RiskScorer};
use qexplorer_core::training::{encode_preferences, encode_sft, pretrain, train_dpo, train_sft, EpochLog, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::Error;

/// Period of the corpus used for evaluation.
pub const EVAL_PERIOD: u32 = 0;
/// Period of the corpus whose reports and feedback build training data.
pub const HISTORY_PERIOD: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusArtifacts {
    pub eval: Corpus,
    pub history: Corpus,
    pub test_reports: Vec<Report>,
    pub train_reports: Vec<Report>,
}

pub fn gen_corpus(cfg: &PipelineConfig, seed: u64) -> Result<CorpusArtifacts, Error> {
    let mut c = cfg.corpus.clone();
    c.seed = seed;
    c.period = EVAL_PERIOD;
    let eval = generate_corpus(&c)?;
    c.period = HISTORY_PERIOD;
    let history = generate_corpus(&c)?;
    let test_reports = sample_reports(&eval, cfg.reports.n_test, mix(seed, 0x7e57))?;
    let train_reports = sample_reports(&history, cfg.reports.n_train, mix(seed, 0x7a1))?;
    Ok(CorpusArtifacts {
        eval,
        history,
        test_reports,
        train_reports,
    })
}

/// Builds a period's index: ranked by a risk model fit on the history
/// period's labels, with the period's reported items taken down.
pub fn build_index(corpus: &Corpus, scorer: &RiskScorer, reports: &[Report]) -> Result<InvertedIndex, Error> {
    let mut index = InvertedIndex::build(corpus.items.iter().cloned())?;
    index.attach_scorer(scorer.clone())?;
    for r in reports {
        index.remove_item(r.item_id)?;
    }
    Ok(index)
}

pub fn fit_scorer(history: &Corpus) -> Result<RiskScorer, Error> {
    Ok(RiskScorer::fit(&history.items)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datasets {
    pub pairs: Vec<AnnotatedPair>,
    pub concat: Vec<ConcatSample>,
    pub preferences: Vec<PreferenceTriple>,
    pub ablation: Vec<PreferenceTriple>,
}

impl Datasets {
    pub fn sft_records(&self, use_concat: bool) -> Vec<SftRecord> {
        let mut out: Vec<SftRecord> = self.pairs.iter().map(render_pair).collect();
        if use_concat {
            out.extend(self.concat.iter().map(render_concat));
        }
        out
    }

    pub fn preference_records(triples: &[PreferenceTriple]) -> Vec<PreferenceRecord> {
        triples.iter().map(render_preference).collect()
    }
}

pub fn make_datasets(
    cfg: &PipelineConfig,
    history_index: &InvertedIndex,
    train_reports: &[Report],
    seed: u64,
) -> Result<Datasets, Error> {
    let snapshot = history_index.snapshot();
    let d = &cfg.datasets;
    let pairs = build_sft_dataset(train_reports, &snapshot)?;
    let groups = cluster_groups(&pairs, d.similarity);
    let concat = build_concat_dataset(&groups, d.max_members, seed);
    let preferences = build_preference_dataset(&groups, &snapshot, d.threshold, d.max_members, seed)?;
    let ablation = build_preference_dataset(&groups, &snapshot, d.ablation_threshold, d.max_members, seed)?;
    Ok(Datasets {
        pairs,
        concat,
        preferences,
        ablation,
    })
}

/// Character vocabulary: the history corpus plus the fixed prompt text.
pub fn build_tokenizer(history: &Corpus) -> Tokenizer {
    let fixed = [SYSTEM_PROMPT, OUTPUT_PREFIX, &model_prompt(",")];
    Tokenizer::from_texts(fixed.into_iter().chain(history.items.iter().map(|i| i.text.as_str())))
}

/// Full-parameter language modelling on history item texts, optionally
/// with rendered SFT samples mixed in.
pub fn pretrain_base(
    cfg: &PipelineConfig,
    tok: &Tokenizer,
    history: &Corpus,
    task: &[SftRecord],
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>), Error> {
    let model = cfg.model.with_vocab(tok.vocab_size());
    let mut params = ModelParams::init(model, mix(seed, 0xba5e))?;
    let ctx = model.context_length;
    let mut data: Vec<Sequence> = history
        .items
        .iter()
        .filter_map(|i| {
            let mut label = tok.encode(&i.text);
            label.push(EOS);
            (label.len() <= ctx).then(|| Sequence::new(vec![BOS], label))
        })
        .collect();
    if cfg.pretrain.include_task_text {
        data.extend(encode_sft(tok, task, ctx)?.0);
    }
    let train = TrainConfig {
        learning_rate: cfg.pretrain.learning_rate,
        batch_size: cfg.pretrain.batch_size,
        seed: mix(seed, 0xba5e),
        ..cfg.sft.clone()
    };
    let logs = pretrain(&mut params, &data, &train, cfg.pretrain.epochs, on_epoch)?;
    Ok((params, logs))
}

pub struct StageOutcome {
    pub adapter: LoraAdapter,
    pub logs: Vec<EpochLog>,
    pub used: usize,
    pub skipped: usize,
}

pub fn sft_stage(
    cfg: &PipelineConfig,
    tok: &Tokenizer,
    base: &ModelParams,
    records: &[SftRecord],
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StageOutcome, Error> {
    let (data, skipped) = encode_sft(tok, records, base.config.context_length)?;
    let train = TrainConfig {
        seed: mix(seed, 0x5f7),
        ..cfg.sft.clone()
    };
    let (adapter, logs) = train_sft(base, &data, &train, on_epoch)?;
    Ok(StageOutcome {
        adapter,
        logs,
        used: data.len(),
        skipped,
    })
}

pub fn dpo_stage(
    cfg: &PipelineConfig,
    tok: &Tokenizer,
    reference: &ModelParams,
    records: &[PreferenceRecord],
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StageOutcome, Error> {
    let (pairs, skipped) = encode_preferences(tok, records, reference.config.context_length)?;
    let train = TrainConfig {
        seed: mix(seed, 0xd90),
        ..cfg.dpo.clone()
    };
    let (adapter, logs) = train_dpo(reference, &pairs, &train, on_epoch)?;
    Ok(StageOutcome {
        adapter,
        logs,
        used: pairs.len(),
        skipped,
    })
}

pub fn merged(base: &ModelParams, adapter: &LoraAdapter) -> Result<ModelParams, Error> {
    Ok(merge_adapter(base, adapter)?)
}

/// `(report_id, content)` of every test report.
pub fn report_contents(corpus: &Corpus, reports: &[Report]) -> Result<Vec<(u64, String)>, Error> {
    reports
        .iter()
        .map(|r| {
            corpus
                .item(r.item_id)
                .map(|i| (r.item_id, i.text.clone()))
                .ok_or_else(|| Error::Integrity(format!("report references unknown item {}", r.item_id)))
        })
        .collect()
}

pub fn human_run(reports: &[Report], snapshot_version: u64) -> QueryRun {
    QueryRun {
        method: "human".into(),
        snapshot_version,
        reports: reports
            .iter()
            .map(|r| {
                let mut queries: Vec<String> = Vec::new();
                for k in &r.oracle_keywords {
                    if !queries.contains(k) {
                        queries.push(k.clone());
                    }
                }
                ReportQueries {
                    report_id: r.item_id,
                    queries,
                }
            })
            .collect(),
    }
}

pub fn tfidf_run(cfg: &PipelineConfig, corpus: &Corpus, contents: &[(u64, String)], version: u64) -> QueryRun {
    let model = TfIdf::fit(corpus.items.iter().map(|i| i.text.as_str()));
    let reports: Vec<(u64, &str)> = contents.iter().map(|(id, c)| (*id, c.as_str())).collect();
    extract_queries_tfidf(&model, &reports, cfg.eval.tfidf_top_n, version)
}

pub fn model_run(
    cfg: &PipelineConfig,
    method: &str,
    params: &ModelParams,
    tok: &Tokenizer,
    contents: &[(u64, String)],
    version: u64,
) -> Result<(QueryRun, Vec<String>), Error> {
    let reports: Vec<(u64, &str)> = contents.iter().map(|(id, c)| (*id, c.as_str())).collect();
    Ok(extract_queries_model(
        method,
        params,
        tok,
        &reports,
        &generation(cfg),
        cfg.eval.decoding,
        version,
    )?)
}

/// Greedy decoding bounded by the configured output length.
pub fn generation(cfg: &PipelineConfig) -> GenerationConfig {
    GenerationConfig {
        max_new_tokens: cfg.eval.max_new_tokens,
        mode: DecodeMode::Greedy,
        stop_token: None,
        seed: 0,
    }
}
