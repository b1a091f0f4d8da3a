//! The five pipeline commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainFlags;
use super::{CliError, Command, DatagenArgs, DetectArgs, EvalArgs, JudgeMode, Manifest, RunConfig, Skipped, SweepArgs};
use crate::datagen::{
    build_records, read_docs_lenient, read_records, synthetic_docs_sized, to_jsonl, DatagenError, PreferenceRecord,
    SourceDoc,
};
use crate::detection::{
    build_contrast_corpus, evaluate_detector, feature_rows, permutation_control, read_traces, run_grid, split_indices,
    write_feature_rows, write_traces, DetectionReport, LabeledTrace,
};
use crate::eval::{aggregate, evaluate_sample, EvalError, EvalRun, EvalSample, Judge, SampleReport};
use crate::gateway::{build_client, LlmClient};
use crate::model::{checkpoint, tokenizer, Model};
use crate::objectives::Objective;
use crate::train::{beta_grid, sweep_beta, train, TrainOptions, TrainReport};

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    manifest.outputs.push(path_str(path));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut Manifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    write_file(path, text + "\n", manifest)
}

/// Folds command-line flags into the resolved configuration.
pub(super) fn apply_flags(cfg: &mut RunConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Datagen(a) => {
            if let Some(p) = &a.input {
                cfg.datagen.input = Some(p.clone());
            }
            if let Some(n) = a.synthetic {
                cfg.datagen.synthetic_docs = n;
            }
            if let Some(w) = a.workers {
                cfg.datagen.workers = w;
            }
        }
        Command::Train(a) => apply_train_flags(cfg, &a.flags),
        Command::SweepBeta(a) => apply_train_flags(cfg, &a.flags),
        Command::Detect(a) => {
            let d = &mut cfg.detection;
            d.grid |= a.grid;
            if let Some(k) = a.classifier {
                d.classifier.kind = k;
            }
            if let Some(p) = a.pooling {
                d.classifier.pooling = p;
            }
            if let Some(f) = a.features {
                d.classifier.features = f;
            }
            d.classifier.log_space |= a.log_space;
            if let Some(n) = a.test_count {
                d.test_count = n;
            }
            if let Some(n) = a.permutation_rounds {
                d.permutation_rounds = n;
            }
        }
        Command::Eval(a) => {
            if let Some(t) = a.label_threshold {
                cfg.eval.label_threshold = t;
            }
            if let Some(j) = a.judge {
                cfg.eval.judge = j;
            }
        }
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = f.objective {
        t.objective = v;
    }
    if let Some(v) = f.beta {
        t.beta = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.micro_batch {
        t.micro_batch = v;
    }
    if let Some(v) = f.warmup_ratio {
        t.warmup_ratio = v;
    }
    if let Some(v) = f.weight_decay {
        t.weight_decay = v;
    }
    if f.full_finetune {
        t.lora.enabled = false;
    }
    if let Some(v) = f.divisor {
        t.divisor = v;
    }
    if let Some(v) = f.val_metric {
        t.val_metric = v;
    }
}

pub(super) fn dispatch(
    command: &Command,
    cfg: &RunConfig,
    dir: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    match command {
        Command::Datagen(a) => cmd_datagen(a, cfg, dir, manifest),
        Command::Train(a) => cmd_train(&a.flags, cfg, dir, manifest),
        Command::SweepBeta(a) => cmd_sweep(a, cfg, dir, manifest),
        Command::Detect(a) => cmd_detect(a, cfg, dir, manifest),
        Command::Eval(a) => cmd_eval(a, cfg, dir, manifest),
    }
}

fn client(cfg: &RunConfig) -> Result<Box<dyn LlmClient>, CliError> {
    Ok(build_client(&cfg.gateway)?)
}

fn cmd_datagen(_: &DatagenArgs, cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let section = &cfg.datagen;
    let docs: Vec<SourceDoc> = match &section.input {
        Some(path) => {
            manifest.inputs.push(path_str(path));
            let (docs, malformed) = read_docs_lenient(path)?;
            manifest.counts.insert("malformed_lines".into(), malformed.len());
            manifest.skipped.extend(malformed.into_iter().map(|m| Skipped {
                item: format!("line {}", m.line),
                reason: m.reason,
            }));
            docs
        }
        None => {
            let [lo, hi] = section.summary_sentences;
            synthetic_docs_sized(section.synthetic_docs, section.seed, lo..=hi)
        }
    };
    manifest.counts.insert("documents".into(), docs.len());
    let docs_path = dir.join("docs.jsonl");
    let body: String = docs
        .iter()
        .map(|d| serde_json::to_string(d).expect("documents serialize") + "\n")
        .collect();
    write_file(&docs_path, body, manifest)?;

    let client = client(cfg)?;
    let mut gateway_failures = 0;
    for (extended, name) in [(false, "standard"), (true, "extended")] {
        let results = build_records(&docs, client.as_ref(), &section.config(extended), section.workers);
        let mut records = Vec::with_capacity(results.len());
        for (doc, r) in docs.iter().zip(results) {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    if matches!(e, DatagenError::Gateway(_)) {
                        gateway_failures += 1;
                    }
                    manifest.skipped.push(Skipped {
                        item: format!("{name}:{}", doc.id),
                        reason: e.to_string(),
                    });
                }
            }
        }
        manifest.counts.insert(format!("{name}_records"), records.len());
        write_file(&dir.join(format!("{name}.jsonl")), to_jsonl(&records), manifest)?;
    }
    println!(
        "datagen: {} documents, {} standard and {} extended records in {}",
        docs.len(),
        manifest.counts["standard_records"],
        manifest.counts["extended_records"],
        dir.display()
    );
    if gateway_failures > 0 {
        return Err(CliError::External(format!(
            "{gateway_failures} record(s) failed at the language-model gateway; partial output kept"
        )));
    }
    Ok(())
}

/// Objectives trained on records with several rejected responses.
fn needs_extended(objective: Objective) -> bool {
    matches!(objective, Objective::AddDpo | Objective::PlDpo | Objective::SepDpo)
}

/// Training and validation records for `train` and `sweep-beta`.
fn load_split(
    flags: &TrainFlags,
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> Result<(Vec<PreferenceRecord>, Vec<PreferenceRecord>), CliError> {
    let dataset = flags.dataset.clone().unwrap_or_else(|| {
        let name = if needs_extended(cfg.train.objective) {
            "extended"
        } else {
            "standard"
        };
        cfg.output_dir.join("datagen").join(format!("{name}.jsonl"))
    });
    if !dataset.exists() {
        return Err(CliError::Data(format!(
            "dataset {} not found; run datagen first or pass --dataset",
            dataset.display()
        )));
    }
    manifest.inputs.push(path_str(&dataset));
    let mut records = read_records(&dataset)?;
    let val = match &flags.val {
        Some(p) => {
            manifest.inputs.push(path_str(p));
            read_records(p)?
        }
        None => {
            let n_val = ((records.len() as f64) * cfg.val_fraction).round() as usize;
            let n_val = n_val.min(records.len().saturating_sub(1));
            records.split_off(records.len() - n_val)
        }
    };
    manifest.counts.insert("train_records".into(), records.len());
    manifest.counts.insert("val_records".into(), val.len());
    Ok((records, val))
}

fn initial_model(flags: &TrainFlags, cfg: &RunConfig, manifest: &mut Manifest) -> Result<Model<f32>, CliError> {
    match &flags.init {
        Some(p) => {
            manifest.inputs.push(path_str(p));
            load_checkpoint(p)
        }
        None => Ok(Model::init(cfg.model)?),
    }
}

fn load_checkpoint(path: &Path) -> Result<Model<f32>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

/// Points at the best epoch of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMarker {
    pub epoch: usize,
    pub metric: f64,
    pub checkpoint: PathBuf,
}

fn cmd_train(flags: &TrainFlags, cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let (train_records, val_records) = load_split(flags, cfg, manifest)?;
    let model = initial_model(flags, cfg, manifest)?;
    let client = client(cfg)?;
    let judge = judge_for(cfg.eval.judge, client.as_ref());
    let log = dir.join("metrics.jsonl");
    let options = TrainOptions {
        run_id: "train",
        out_dir: Some(dir),
        log_path: Some(&log),
        judge,
    };
    let report: TrainReport<f32> = train(&model, &train_records, &val_records, &cfg.train, &options)?;
    manifest.outputs.push(path_str(&log));
    manifest.outputs.extend(
        report
            .checkpoints
            .iter()
            .filter_map(|c| c.path.as_deref())
            .map(path_str),
    );
    manifest.counts.insert("steps".into(), report.total_steps);
    write_json(&dir.join("validation.json"), &report.validation, manifest)?;
    for v in &report.validation {
        println!(
            "epoch {:>3}  margin {:>9.4}  positive {:>6.3}  metric {:.4}",
            v.epoch, v.margin, v.positive_fraction, v.metric
        );
    }
    if let Some(best) = report.best() {
        let marker = BestMarker {
            epoch: best.epoch,
            metric: best.metric,
            checkpoint: best.path.clone().unwrap_or_default(),
        };
        write_json(&dir.join("best.json"), &marker, manifest)?;
        println!("best epoch {} ({})", marker.epoch, marker.checkpoint.display());
    }
    Ok(())
}

/// Parses `start:end:step` or a comma-separated list of β values.
pub fn parse_betas(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |m: String| CliError::Usage(format!("--betas {spec}: {m}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
        return beta_grid(v[0], v[1], v[2]).map_err(|e| bad(e.to_string()));
    }
    let betas: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
        .collect::<Result<_, _>>()?;
    if betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(bad("every β must be positive".into()));
    }
    Ok(betas)
}

fn cmd_sweep(args: &SweepArgs, cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let betas = parse_betas(&args.betas)?;
    let (train_records, val_records) = load_split(&args.flags, cfg, manifest)?;
    let model = initial_model(&args.flags, cfg, manifest)?;
    let report = sweep_beta(&model, &train_records, &val_records, &cfg.train, &betas, Some(dir))?;
    write_json(&dir.join("report.json"), &report, manifest)?;
    let table = report.to_markdown();
    write_file(&dir.join("report.md"), &table, manifest)?;
    print!("{table}");
    manifest.counts.insert("betas".into(), report.rows.len());
    manifest.counts.insert("failures".into(), report.failures());
    if let Some(row) = report.rows.iter().find(|r| r.error.is_some()) {
        let msg = format!("β = {}: {}", row.beta, row.error.as_deref().unwrap_or_default());
        return Err(if row.non_finite {
            CliError::Numeric(msg)
        } else {
            CliError::Data(msg)
        });
    }
    Ok(())
}

fn best_checkpoint(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let marker = cfg.output_dir.join("train").join("best.json");
    if !marker.exists() {
        return Err(CliError::Data(format!(
            "no checkpoint given and {} not found; train first or pass --checkpoint",
            marker.display()
        )));
    }
    let text = std::fs::read_to_string(&marker).map_err(|e| CliError::io(&marker, e))?;
    let best: BestMarker =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", marker.display())))?;
    Ok(best.checkpoint)
}

fn cmd_detect(args: &DetectArgs, cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let section = &cfg.detection;
    let traces: Vec<LabeledTrace> = if let Some(p) = &args.traces {
        manifest.inputs.push(path_str(p));
        read_traces(p)?
    } else if let Some(annotated) = &args.annotated {
        let ckpt = match &args.checkpoint {
            Some(p) => p.clone(),
            None => best_checkpoint(cfg)?,
        };
        manifest.inputs.push(path_str(annotated));
        manifest.inputs.push(path_str(&ckpt));
        let model = load_checkpoint(&ckpt)?;
        let ingest = crate::datagen::ingest_annotated(annotated)?;
        manifest.skipped.extend(ingest.malformed.iter().map(|m| Skipped {
            item: format!("line {}", m.line),
            reason: m.reason.clone(),
        }));
        let mut traces = Vec::new();
        for r in &ingest.records {
            let prompt = tokenizer::encode_prompt(&cfg.datagen.prompt_style.render(&r.source));
            let response = tokenizer::tokenize(&r.response);
            match model.trace_forced(&prompt, &response) {
                Ok(trace) => traces.push(LabeledTrace {
                    id: r.id.clone(),
                    label: r.label,
                    trace,
                }),
                Err(e) => manifest.skipped.push(Skipped {
                    item: r.id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let path = dir.join("traces.jsonl");
        write_traces(&path, &traces)?;
        manifest.outputs.push(path_str(&path));
        traces
    } else {
        let corpus = build_contrast_corpus(&section.corpus)?;
        let path = dir.join("traces.jsonl");
        write_traces(&path, &corpus.traces)?;
        manifest.outputs.push(path_str(&path));
        corpus.traces
    };
    manifest.counts.insert("traces".into(), traces.len());
    if traces.len() < 4 {
        return Err(CliError::Data(format!("{} traces are too few to split", traces.len())));
    }
    let test_count = section.test_count.min(traces.len() / 2);
    let (train_idx, test_idx) = split_indices(traces.len(), test_count, section.seed);
    let train_set: Vec<LabeledTrace> = train_idx.iter().map(|&i| traces[i].clone()).collect();
    let test_set: Vec<LabeledTrace> = test_idx.iter().map(|&i| traces[i].clone()).collect();
    manifest.counts.insert("train_traces".into(), train_set.len());
    manifest.counts.insert("test_traces".into(), test_set.len());

    let rows = feature_rows(&traces, &section.classifier)?;
    let features = dir.join("features.jsonl");
    write_feature_rows(&features, &rows)?;
    manifest.outputs.push(path_str(&features));

    let reports: Vec<DetectionReport> = if section.grid {
        run_grid(&train_set, &test_set, &section.classifier, section.seed)?
    } else {
        let (detector, report) = evaluate_detector(&train_set, &test_set, &section.classifier, section.seed)?;
        write_json(&dir.join("detector.json"), &detector, manifest)?;
        vec![report]
    };
    if section.grid {
        write_json(&dir.join("report.json"), &reports, manifest)?;
    } else {
        write_json(&dir.join("report.json"), &reports[0], manifest)?;
    }
    println!("| classifier | pooling | features | P | R | F1 |");
    println!("|---|---|---|---|---|---|");
    for r in &reports {
        println!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} |",
            r.spec.kind.name(),
            r.spec.pooling.name(),
            r.spec.features.name(),
            r.precision,
            r.recall,
            r.f1
        );
    }
    if section.permutation_rounds > 0 {
        let control = permutation_control(
            &train_set,
            &test_set,
            &section.classifier,
            section.permutation_rounds,
            section.seed,
        )?;
        println!(
            "permutation control: F1 {:.3}, chance {:.3} ± {:.3} (3σ: {})",
            control.f1,
            control.chance,
            control.sigma,
            if control.within_chance() { "within" } else { "outside" }
        );
        write_json(&dir.join("permutation.json"), &control, manifest)?;
    }
    Ok(())
}

fn judge_for(mode: JudgeMode, client: &dyn LlmClient) -> Judge<'_> {
    match mode {
        JudgeMode::Proxy => Judge::Proxy,
        JudgeMode::External => Judge::for_client(client),
    }
}

/// A sample the eval command could not score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub reason: String,
}

/// The eval report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub run: EvalRun,
    pub failures: Vec<SampleFailure>,
}

fn read_samples(path: &Path) -> Result<Vec<EvalSample>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let samples: Vec<EvalSample> = if let Some(p) = &args.samples {
        manifest.inputs.push(path_str(p));
        read_samples(p)?
    } else {
        let docs_path = args
            .docs
            .clone()
            .unwrap_or_else(|| cfg.output_dir.join("datagen").join("docs.jsonl"));
        if !docs_path.exists() {
            return Err(CliError::Data(format!(
                "documents {} not found; pass --samples or --docs",
                docs_path.display()
            )));
        }
        manifest.inputs.push(path_str(&docs_path));
        let (docs, malformed) = read_docs_lenient(&docs_path)?;
        manifest.skipped.extend(malformed.into_iter().map(|m| Skipped {
            item: format!("line {}", m.line),
            reason: m.reason,
        }));
        if args.golden {
            docs.into_iter()
                .map(|d| EvalSample {
                    candidate: d.summary.clone(),
                    id: d.id,
                    source: d.text,
                    golden: d.summary,
                })
                .collect()
        } else {
            let ckpt = match &args.checkpoint {
                Some(p) => p.clone(),
                None => best_checkpoint(cfg)?,
            };
            manifest.inputs.push(path_str(&ckpt));
            let model = load_checkpoint(&ckpt)?;
            let mut out = Vec::with_capacity(docs.len());
            for d in docs {
                let prompt = cfg.datagen.prompt_style.render(&d.text);
                let (candidate, _) = model.generate_text(&prompt, cfg.eval.max_new_tokens)?;
                out.push(EvalSample {
                    id: d.id,
                    source: d.text,
                    golden: d.summary,
                    candidate,
                });
            }
            let path = dir.join("samples.jsonl");
            let body: String = out
                .iter()
                .map(|s| serde_json::to_string(s).expect("samples serialize") + "\n")
                .collect();
            write_file(&path, body, manifest)?;
            out
        }
    };
    let client = client(cfg)?;
    let judge = judge_for(cfg.eval.judge, client.as_ref());
    let mut reports: Vec<SampleReport> = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    let mut external_failures = 0;
    for s in &samples {
        match evaluate_sample(s, judge, cfg.eval.label_threshold) {
            Ok(r) => reports.push(r),
            Err(e) => {
                if matches!(e, EvalError::Gateway(_) | EvalError::JudgeReply(_)) {
                    external_failures += 1;
                }
                failures.push(SampleFailure {
                    id: s.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    manifest.counts.insert("samples".into(), samples.len());
    manifest.counts.insert("scored".into(), reports.len());
    manifest.counts.insert("failed".into(), failures.len());
    let output = EvalOutput {
        run: EvalRun {
            judge: if judge.is_proxy() { "proxy" } else { "external" }.into(),
            label_threshold: cfg.eval.label_threshold,
            aggregate: aggregate(&reports),
            samples: reports,
        },
        failures,
    };
    write_json(&dir.join("report.json"), &output, manifest)?;
    let a = &output.run.aggregate;
    println!(
        "eval: {} scored, {} failed; R-1 {:.3} R-2 {:.3} R-L {:.3} C {:.2}±{:.2} F {:.3} B {:.3}; {} hallucinated at F < {}",
        a.count,
        output.failures.len(),
        a.rouge1.mean,
        a.rouge2.mean,
        a.rouge_l.mean,
        a.completeness.mean,
        a.completeness.std,
        a.f_score.mean,
        a.b_score.mean,
        a.hallucinated,
        output.run.label_threshold
    );
    if external_failures > 0 {
        return Err(CliError::External(format!(
            "{external_failures} sample(s) failed at the judge"
        )));
    }
    Ok(())
}
