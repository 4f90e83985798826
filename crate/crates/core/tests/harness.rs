//! End-to-end checks of the experiment harness on tiny configurations.

use std::fs;
use std::path::Path;

use mrtb_core::balancing::Method;
use mrtb_core::harness::{
    analyze_tradeoff, read_summary, run_experiment, run_grid, run_reference_sweep, RunConfig, RunStatus, SplitMode,
    STEP_HEADER, SUMMARY_HEADER,
};
use mrtb_core::model::{Balance, Model, ModelConfig, RoutingPolicy, TokenBatch};
use mrtb_core::optim::{AdamW, Schedule};

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.output_dir = dir.to_path_buf();
    cfg.data.tokens_per_domain = 8;
    cfg.data.generic_tokens = 8;
    cfg.data.tokens_per_domain_total = 4096;
    cfg.data.doc_length_min = 32;
    cfg.data.doc_length_max = 64;
    cfg.data.seq_len = 32;
    cfg.data.validation_fraction = 0.1;
    cfg.model.hidden = 16;
    cfg.model.expert_hidden = 16;
    cfg.model.heads = 2;
    cfg.model.max_seq_len = 32;
    cfg.train.steps = 6;
    cfg.train.batch_size = 4;
    cfg.train.final_window = 3;
    cfg.optim.warmup = 2;
    cfg.grid.scopes = vec![1, 4];
    cfg.grid.strengths = vec![0.01, 1.0];
    cfg.split.classifier.epochs = 1;
    cfg
}

#[test]
fn run_writes_documented_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let record = run_experiment(&cfg).unwrap();
    assert_eq!(record.summary.status, RunStatus::Completed);
    let steps = fs::read_to_string(dir.path().join("steps.tsv")).unwrap();
    let mut lines = steps.lines();
    assert_eq!(lines.next(), Some(STEP_HEADER));
    // One row per step for the single MoE layer.
    assert_eq!(lines.count(), cfg.train.steps);
    for name in ["config.toml", "split.tsv", "eval.tsv", "record.tsv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let saved = RunConfig::from_file(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved.digest().unwrap(), cfg.digest().unwrap());
}

#[test]
fn grid_resume_reuses_finished_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.grid.methods = vec![Method::Lbl, Method::Eb, Method::None];
    let first = run_grid(&cfg, Some(2)).unwrap();
    // LBL at 2 scopes × 2 strengths, EB only at the global scope, one unbalanced run per scope.
    assert_eq!(first.len(), 4 + 2 + 2);
    let summary = dir.path().join("summary.tsv");
    let text = fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().next(), Some(SUMMARY_HEADER));
    let stamps: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| fs::metadata(e.path().join("steps.tsv")).unwrap().modified().unwrap())
        .collect();
    let second = run_grid(&cfg, Some(1)).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read_to_string(&summary).unwrap(), text);
    let again: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| fs::metadata(e.path().join("steps.tsv")).unwrap().modified().unwrap())
        .collect();
    assert_eq!(stamps, again);
    assert_eq!(read_summary(&summary).unwrap(), first);
    for row in &first {
        assert!(row.method != Method::Eb || row.scope == cfg.train.batch_size);
        assert_eq!(row.strength.is_some(), matches!(row.method, Method::Lbl | Method::Eb));
    }
}

#[test]
fn tradeoff_report_is_written_next_to_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_grid(&cfg, None).unwrap();
    let (report, path) = analyze_tradeoff(&dir.path().join("summary.tsv")).unwrap();
    assert_eq!(report.runs, 4);
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with('#'));
    if let Some(rho) = report.spearman {
        assert!((-1.0..=1.0).contains(&rho));
    }
}

#[test]
fn sweep_ratio_zero_matches_a_learned_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("sweep"));
    let rows = run_reference_sweep(&cfg, &[0.0, 1.0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].realized_ratio == Some(1.0));
    assert_eq!(rows[1].purity, Some(1.0));
    let swept = fs::read(dir.path().join("sweep").join("ratio_0").join("steps.tsv")).unwrap();

    cfg.output_dir = dir.path().join("learned");
    cfg.split.mode = SplitMode::None;
    run_experiment(&cfg).unwrap();
    let learned = fs::read(dir.path().join("learned").join("steps.tsv")).unwrap();
    assert_eq!(swept, learned);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let prepared = mrtb_core::harness::prepare(&cfg).unwrap();
    let seqs: Vec<_> = prepared.corpus.sequences.iter().take(8).cloned().collect();
    let membership = prepared.split.membership();
    let batch = TokenBatch::from_sequences(&seqs, 4, 2, &membership).unwrap();
    let train = || {
        let config = ModelConfig {
            vocab_size: prepared.corpus.vocab_size,
            ..cfg.model.clone()
        };
        let mut model = Model::new(config, 21).unwrap();
        let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.data().len()).collect();
        let mut opt = AdamW::new(cfg.optim.clone(), Schedule::Constant, &shapes);
        let balance = Balance {
            method: Method::Lbl,
            strength: 0.1,
        };
        for _ in 0..4 {
            model.train_step(&batch, &RoutingPolicy::default(), balance, &mut opt).unwrap();
        }
        model.params.flatten()
    };
    let (a, b) = (train(), train());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
