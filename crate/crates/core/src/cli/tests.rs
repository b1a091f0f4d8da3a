use std::path::Path;

use super::*;
use crate::detection::{write_traces, LabeledTrace};
use crate::model::{Model, ModelConfig};

const TINY: &str = r#"
seed = 3

[model]
layers = 1
heads = 2
d_model = 16
d_ff = 32
context = 320

[datagen]
synthetic_docs = 12

[train]
epochs = 2
lr = 1e-3
val_metric = "margin"

[train.lora]
enabled = false
"#;

fn no_env() -> Vec<(String, String)> {
    Vec::new()
}

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    let config = dir.join("config.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    let out = dir.join("runs");
    let mut full = vec![
        "truebrief".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--offline".into(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    run_with_env(full, no_env())
}

fn manifest(dir: &Path, command: &str) -> Manifest {
    Manifest::read(&dir.join("runs").join(command).join("manifest.json")).unwrap()
}

#[test]
fn defaults_validate_and_snapshot_round_trips() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let table: toml::Table = cfg.snapshot().parse().unwrap();
    assert_eq!(RunConfig::from_table(table).unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "bogus = 1",
        "[train]\nbetta = 0.5",
        "[detection.classifier]\nkernel = \"rbf\"",
    ] {
        let table: toml::Table = text.parse().unwrap();
        assert!(RunConfig::from_table(table).is_err(), "{text}");
    }
}

#[test]
fn environment_overrides_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[train]\nbeta = 0.2\n").unwrap();
    let env = vec![
        ("TRUEBRIEF__TRAIN__BETA".to_string(), "0.7".to_string()),
        ("TRUEBRIEF__OUTPUT_DIR".to_string(), "/tmp/x".to_string()),
        (
            "TRUEBRIEF__DETECTION__CLASSIFIER__POOLING".to_string(),
            "max".to_string(),
        ),
        ("UNRELATED".to_string(), "1".to_string()),
    ];
    let cfg = RunConfig::load(Some(&path), env).unwrap();
    assert_eq!(cfg.train.beta, 0.7);
    assert_eq!(cfg.output_dir, Path::new("/tmp/x"));
    assert_eq!(cfg.detection.classifier.pooling, crate::detection::Pooling::Max);
    let bad = vec![("TRUEBRIEF__TRAIN__NOPE".to_string(), "1".to_string())];
    assert!(RunConfig::load(None, bad).is_err());
}

#[test]
fn global_seed_fills_sections_without_their_own() {
    let table: toml::Table = "seed = 9\n[train]\nseed = 4\n".parse().unwrap();
    let cfg = RunConfig::from_table(table).unwrap();
    assert_eq!((cfg.model.seed, cfg.datagen.seed, cfg.train.seed), (9, 9, 4));
    assert_eq!(
        (cfg.detection.seed, cfg.detection.corpus.seed, cfg.gateway.seed),
        (9, 9, 9)
    );
}

#[test]
fn api_key_never_reaches_the_snapshot() {
    let mut cfg = RunConfig::default();
    cfg.gateway.api_key = Some("sk-secret".into());
    assert!(!cfg.snapshot().contains("sk-secret"));
}

#[test]
fn beta_specs_parse() {
    assert_eq!(parse_betas("0.2:0.8:0.1").unwrap().len(), 7);
    assert_eq!(parse_betas("0.1, 0.5").unwrap(), vec![0.1, 0.5]);
    assert_eq!(parse_betas("0.1:x:0.1").unwrap_err().exit_code(), 2);
    assert_eq!(parse_betas("0,0.5").unwrap_err().exit_code(), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["train", "--objective", "ppo"]), 2);
    assert_eq!(run_in(dir.path(), &["frobnicate"]), 2);
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbetta = 1\n").unwrap();
    let args = [
        "truebrief",
        "--config",
        &dir.path().join("bad.toml").display().to_string(),
        "datagen",
    ]
    .map(String::from);
    assert_eq!(run_with_env(args, no_env()), 2);
}

#[test]
fn datagen_emits_standard_and_extended_records_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("docs.jsonl");
    let docs = crate::datagen::synthetic_docs_sized(10, 5, 1..=2);
    let mut body: String = docs.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect();
    body.push_str("{not json}\n");
    std::fs::write(&input, &body).unwrap();
    let input = input.display().to_string();
    assert_eq!(run_in(dir.path(), &["datagen", "--input", &input]), 0);
    let m = manifest(dir.path(), "datagen");
    assert_eq!(m.status, "ok");
    assert_eq!(m.counts["standard_records"], 10);
    assert_eq!(m.counts["extended_records"], 10);
    assert_eq!(m.counts["malformed_lines"], 1);
    assert_eq!(m.skipped[0].item, "line 11");
    let read = |name: &str| std::fs::read(dir.path().join("runs/datagen").join(name)).unwrap();
    let (standard, extended) = (read("standard.jsonl"), read("extended.jsonl"));
    assert_eq!(run_in(dir.path(), &["datagen", "--input", &input]), 0);
    assert_eq!(read("standard.jsonl"), standard);
    assert_eq!(read("extended.jsonl"), extended);
    let snapshot = std::fs::read_to_string(dir.path().join("runs/datagen/config.toml")).unwrap();
    assert!(snapshot.contains("offline = true"));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["train"]), 3);
    assert_eq!(manifest(dir.path(), "train").exit_code, 3);
    let traces = dir.path().join("a.jsonl");
    std::fs::write(&traces, "").unwrap();
    let t = traces.display().to_string();
    assert_eq!(
        run_in(
            dir.path(),
            &["detect", "--annotated", &t, "--checkpoint", "/nonexistent.tblm"]
        ),
        3
    );
    assert!(manifest(dir.path(), "detect").error.unwrap().contains("not found"));
    assert_eq!(run_in(dir.path(), &["eval"]), 3);
}

#[test]
fn train_writes_checkpoints_and_best_marker_then_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["datagen"]), 0);
    assert_eq!(run_in(dir.path(), &["train", "--objective", "dpo", "--beta", "0.5"]), 0);
    let train_dir = dir.path().join("runs/train");
    for f in [
        "epoch-1.tblm",
        "epoch-2.tblm",
        "metrics.jsonl",
        "validation.json",
        "best.json",
        "manifest.json",
    ] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    let m = manifest(dir.path(), "train");
    assert_eq!((m.counts["train_records"], m.counts["val_records"]), (10, 2));
    let best: BestMarker =
        serde_json::from_str(&std::fs::read_to_string(train_dir.join("best.json")).unwrap()).unwrap();
    assert!(best.checkpoint.exists());

    assert_eq!(run_in(dir.path(), &["eval"]), 0);
    let out: EvalOutput =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/eval/report.json")).unwrap()).unwrap();
    assert_eq!(out.run.samples.len() + out.failures.len(), 12);
}

#[test]
fn numerical_failure_exits_with_five() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["datagen"]), 0);
    assert_eq!(run_in(dir.path(), &["train", "--lr", "1e200"]), 5);
    assert_eq!(manifest(dir.path(), "train").status, "failed");
}

#[test]
fn golden_self_eval_is_perfect_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["datagen"]), 0);
    assert_eq!(run_in(dir.path(), &["eval", "--golden", "--label-threshold", "0.9"]), 0);
    let out: EvalOutput =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/eval/report.json")).unwrap()).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.run.label_threshold, 0.9);
    for s in &out.run.samples {
        assert_eq!(s.rouge.rouge1.f1, 1.0);
        assert_eq!(s.f_score, 1.0);
        assert_eq!(s.label, crate::eval::HallucinationLabel::Clean);
        let b = (f64::from(s.judge.completeness) / 5.0 + s.f_score) / 2.0;
        assert!((s.b_score - b).abs() < 1e-12);
    }
}

fn write_fixture_traces(dir: &Path) -> String {
    let m = Model::<f64>::init(ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        context: 64,
        ..ModelConfig::default()
    })
    .unwrap();
    let traces: Vec<LabeledTrace> = (0..24u32)
        .map(|i| {
            let prompt: Vec<u32> = (0..3 + i % 5).map(|k| (i * 7 + k * 13) % 256).collect();
            LabeledTrace {
                id: format!("t{i}"),
                label: i % 2 == 0,
                trace: m.generate_with_trace(&prompt, 4, None).unwrap().1,
            }
        })
        .collect();
    let path = dir.join("traces.jsonl");
    write_traces(&path, &traces).unwrap();
    path.display().to_string()
}

#[test]
fn detect_grid_emits_nine_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let traces = write_fixture_traces(dir.path());
    std::fs::write(
        dir.path().join("config.toml"),
        format!("{TINY}\n[detection]\npermutation_rounds = 2\n[detection.classifier]\nhidden = [8]\nmax_iter = 20\n"),
    )
    .unwrap();
    assert_eq!(run_in(dir.path(), &["detect", "--traces", &traces, "--grid"]), 0);
    let report = || std::fs::read_to_string(dir.path().join("runs/detect/report.json")).unwrap();
    let rows: Vec<serde_json::Value> = serde_json::from_str(&report()).unwrap();
    assert_eq!(rows.len(), 9);
    let first = report();
    assert_eq!(run_in(dir.path(), &["detect", "--traces", &traces, "--grid"]), 0);
    assert_eq!(report(), first);

    assert_eq!(run_in(dir.path(), &["detect", "--traces", &traces]), 0);
    let single: serde_json::Value = serde_json::from_str(&report()).unwrap();
    assert_eq!(single["spec"]["kind"], "logistic-regression");
    assert_eq!(single["spec"]["pooling"], "mean");
    assert!(dir.path().join("runs/detect/features.jsonl").exists());
    assert!(dir.path().join("runs/detect/permutation.json").exists());
}

#[test]
fn sweep_writes_a_table_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["datagen"]), 0);
    assert_eq!(
        run_in(dir.path(), &["sweep-beta", "--betas", "0.2,0.4", "--epochs", "1"]),
        0
    );
    let table = std::fs::read_to_string(dir.path().join("runs/sweep-beta/report.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| 0.")).count(), 2);
}
