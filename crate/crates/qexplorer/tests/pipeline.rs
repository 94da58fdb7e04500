#![allow(clippy::field_reassign_with_default)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use qexplorer::artifacts::StageManifest;
use qexplorer::config::PipelineConfig;
use qexplorer::io::{read_json, sha256_file};
use qexplorer::pipeline::{Pipeline, Stage, METHODS};
use qexplorer::Error;

fn tiny(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![3];
    cfg.corpus.n_items = 2000;
    cfg.reports.n_test = 20;
    cfg.reports.n_train = 40;
    cfg.datasets.max_members = 2;
    cfg.model.n_layers = 1;
    cfg.model.d_model = 8;
    cfg.model.n_heads = 2;
    cfg.model.context_length = 64;
    cfg.sft.sft_epochs = 1;
    cfg.sft.learning_rate = 3e-3;
    cfg.dpo.dpo_epochs = 2;
    cfg.dpo.learning_rate = 1e-3;
    cfg.eval.max_new_tokens = 16;
    cfg
}

/// Every output of every stage, keyed by stage then file.
fn all_hashes(p: &Pipeline, seed: u64) -> BTreeMap<String, BTreeMap<String, String>> {
    let dir = p.seed_dir(seed).join("manifests");
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let m: StageManifest = read_json(&entry.unwrap().path()).unwrap();
        out.insert(m.stage.clone(), m.outputs);
    }
    out
}

#[test]
fn reruns_are_bit_identical_across_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = Pipeline::new(tiny(a.path())).unwrap();
    let pb = Pipeline::new(tiny(b.path())).unwrap();
    let ra = pa.run_seed(3).unwrap();
    let rb = pb.run_seed(3).unwrap();
    assert_eq!(ra, rb);
    let ha = all_hashes(&pa, 3);
    assert_eq!(ha.len(), 9);
    assert_eq!(ha, all_hashes(&pb, 3));
    // The hashes are of the bytes on disk.
    for (name, hash) in &ha["corpus"] {
        assert_eq!(&sha256_file(&pa.seed_dir(3).join(name)).unwrap(), hash);
    }
    for m in METHODS {
        assert!(ra.hit_rate(m).is_some(), "{m} missing from the report");
    }
}

#[test]
fn completed_stages_are_skipped_and_damaged_ones_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    p.run_seed(3).unwrap();
    let before = all_hashes(&p, 3);
    let base = p.seed_dir(3).join("models/base.json");
    let stamp = fs::metadata(&base).unwrap().modified().unwrap();

    p.run_seed(3).unwrap();
    assert_eq!(fs::metadata(&base).unwrap().modified().unwrap(), stamp);

    // A corrupted artifact fails verification, so its stage runs again and
    // reproduces the same bytes.
    let sft = p.seed_dir(3).join("models/sft_adapter.json");
    fs::write(&sft, b"{}").unwrap();
    p.run_seed(3).unwrap();
    assert_eq!(all_hashes(&p, 3), before);
    assert_eq!(fs::metadata(&base).unwrap().modified().unwrap(), stamp);
}

#[test]
fn config_changes_invalidate_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    let sft = p.ensure(3, Stage::Sft).unwrap();
    let dpo = p.ensure(3, Stage::Dpo).unwrap();

    let mut cfg = tiny(dir.path());
    cfg.dpo.beta = 0.2;
    let q = Pipeline::new(cfg).unwrap();
    assert_eq!(q.ensure(3, Stage::Sft).unwrap(), sft);
    let dpo2 = q.ensure(3, Stage::Dpo).unwrap();
    assert_ne!(dpo2.key, dpo.key);
    assert_ne!(dpo2.outputs, dpo.outputs);
}

#[test]
fn loading_a_tampered_artifact_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    let m = p.ensure(3, Stage::Corpus).unwrap();
    let path = p.seed_dir(3).join("corpus/test_reports.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    match p.load_corpus(3, &m) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("test_reports"), "{msg}"),
        other => panic!("expected an integrity error, got {other:?}"),
    }
}

#[test]
fn summary_averages_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![3, 4];
    let p = Pipeline::new(cfg).unwrap();
    let summary = p.run_all().unwrap();
    let r3 = p.run_seed(3).unwrap();
    let r4 = p.run_seed(4).unwrap();
    for m in METHODS {
        let want = (r3.hit_rate(m).unwrap() + r4.hit_rate(m).unwrap()) / 2.0;
        assert!((summary.mean(m).unwrap() - want).abs() < 1e-12);
    }
    assert!(dir.path().join("summary.json").exists());
    let text = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(text.contains("qexplorer"));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.eval.max_new_tokens = 64;
    assert!(matches!(Pipeline::new(cfg), Err(Error::Config(_))));
    let mut cfg = tiny(dir.path());
    cfg.seeds.clear();
    assert!(matches!(Pipeline::new(cfg), Err(Error::Config(_))));
}
