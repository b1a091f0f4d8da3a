//! Command-line front end: `datagen`, `train`, `detect`, `eval` and
//! `sweep-beta`, each reading the artifacts of the previous stage and writing
//! its own under `<output_dir>/<command>` with a manifest.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 external-service error,
//! 5 numerical failure.

mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use commands::{parse_betas, BestMarker, EvalOutput, SampleFailure};
pub use config::{ConfigError, DatagenSection, DetectionSection, EvalSection, JudgeMode, RunConfig};

use crate::datagen::DatagenError;
use crate::detection::{ClassifierKind, DetectError, FeatureSet, Pooling};
use crate::eval::EvalError;
use crate::gateway::GatewayError;
use crate::model::ModelError;
use crate::numcore::NumError;
use crate::objectives::{DivisorMode, Objective};
use crate::train::{TrainError, ValMetric};

/// A failed command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    External(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::External(_) => 4,
            Self::Numeric(_) => 5,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

fn num_is_non_finite(e: &NumError) -> bool {
    matches!(e, NumError::NonFinite { .. })
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::External(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Num(n) if num_is_non_finite(n) => Self::Numeric(e.to_string()),
            ModelError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Gateway(g) => g.into(),
            DatagenError::NoStages => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            EvalError::JudgeReply(_) => Self::External(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_non_finite() {
            return Self::Numeric(e.to_string());
        }
        match e {
            TrainError::InvalidConfig(_) => Self::Usage(e.to_string()),
            TrainError::Eval(inner) => inner.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match &e {
            DetectError::Num(n) if num_is_non_finite(n) => Self::Numeric(e.to_string()),
            DetectError::InvalidSpec(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Parses a kebab-case name through the type's serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "truebrief",
    version,
    about = "Faithful summarization pipeline on a toy decoder"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the global seed and every section seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the deterministic stub instead of any configured endpoint.
    #[arg(long, global = true)]
    pub offline: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build standard and extended preference datasets.
    Datagen(DatagenArgs),
    /// Finetune with SFT or a DPO-family objective.
    Train(TrainArgs),
    /// Train and score hallucination detectors on generation traces.
    Detect(DetectArgs),
    /// Score summaries with ROUGE, judge dimensions, F and B.
    Eval(EvalArgs),
    /// Train once per β and tabulate the results.
    SweepBeta(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Datagen(_) => "datagen",
            Self::Train(_) => "train",
            Self::Detect(_) => "detect",
            Self::Eval(_) => "eval",
            Self::SweepBeta(_) => "sweep-beta",
        }
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// `{id, text, summary}` JSON lines; overrides `datagen.input`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of synthetic documents when no input is given.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Documents processed in parallel.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// sft, dpo, add-dpo, pl-dpo or sep-dpo.
    #[arg(long, value_parser = kebab::<Objective>)]
    pub objective: Option<Objective>,
    /// Strength of the reference-model constraint.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Passes over the training set.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Samples per gradient accumulation chunk; 0 means the whole batch.
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Share of steps spent in linear warmup before cosine decay.
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    /// Decoupled AdamW weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Train all weights instead of a low-rank adapter.
    #[arg(long)]
    pub full_finetune: bool,
    /// Add-DPO rejected-sum divisor: k or k-minus1.
    #[arg(long, value_parser = kebab::<DivisorMode>)]
    pub divisor: Option<DivisorMode>,
    /// Checkpoint selection metric: faithfulness or margin.
    #[arg(long, value_parser = kebab::<ValMetric>)]
    pub val_metric: Option<ValMetric>,
    /// Preference records; defaults to the datagen output matching the objective.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Validation records; defaults to the tail of the dataset.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Starting checkpoint; a fresh model when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0.2:0.8:0.1")]
    pub betas: String,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Labeled generation traces (JSON lines).
    #[arg(long, conflicts_with = "annotated")]
    pub traces: Option<PathBuf>,
    /// Annotated responses to replay through a checkpoint.
    #[arg(long)]
    pub annotated: Option<PathBuf>,
    /// Checkpoint for `--annotated`; defaults to the best training epoch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// All classifier kinds and poolings.
    #[arg(long)]
    pub grid: bool,
    /// logistic-regression, linear-svm or mlp.
    #[arg(long, value_parser = kebab::<ClassifierKind>)]
    pub classifier: Option<ClassifierKind>,
    /// mean, max or statistical.
    #[arg(long, value_parser = kebab::<Pooling>)]
    pub pooling: Option<Pooling>,
    /// lr, ll or concat.
    #[arg(long, value_parser = kebab::<FeatureSet>)]
    pub features: Option<FeatureSet>,
    /// Feed lens log-probabilities instead of probabilities.
    #[arg(long)]
    pub log_space: bool,
    /// Size of the held-out split.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Label-shuffled control rounds; 0 disables the control.
    #[arg(long)]
    pub permutation_rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `{id, source, golden, candidate}` JSON lines.
    #[arg(long, conflicts_with_all = ["checkpoint", "golden"])]
    pub samples: Option<PathBuf>,
    /// Generate candidates for `--docs` with this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Documents to summarize; defaults to the datagen copy.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    /// Score the reference summaries themselves.
    #[arg(long, conflicts_with = "checkpoint")]
    pub golden: bool,
    /// Label a sample hallucinated when its F score is below this value.
    #[arg(long)]
    pub label_threshold: Option<f64>,
    /// proxy or external.
    #[arg(long, value_parser = kebab::<JudgeMode>)]
    pub judge: Option<JudgeMode>,
}

/// Written to every command directory, also when the command fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    /// Inputs left out, with the reason.
    pub skipped: Vec<Skipped>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub item: String,
    pub reason: String,
}

impl Manifest {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            status: "running".into(),
            exit_code: 0,
            seed,
            config: "config.toml".into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            skipped: Vec::new(),
            error: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Resolves the configuration from file, environment and global flags.
pub fn resolve_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
    let env: Vec<(String, String)> = env.into_iter().collect();
    let mut cfg = RunConfig::load(cli.config.as_deref(), env.iter().cloned())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.offline {
        cfg.gateway.offline = true;
    }
    cfg.gateway
        .apply_env_with(|k| env.iter().find(|(name, _)| name == k).map(|(_, v)| v.clone()));
    Ok(cfg)
}

/// Runs one command with `env` as the environment and returns the exit code.
pub fn run_with_env(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    env: impl IntoIterator<Item = (String, String)>,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point of the binary.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run_with_env(std::env::args_os(), std::env::vars())
}

/// Resolves the configuration and runs `cli.command`, writing the config
/// snapshot and manifest.
pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, env)?;
    commands::apply_flags(&mut cfg, &cli.command)?;
    cfg.validate()?;
    let dir = cfg.output_dir.join(cli.command.name());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let snapshot = dir.join("config.toml");
    std::fs::write(&snapshot, cfg.snapshot()).map_err(|e| CliError::io(&snapshot, e))?;
    let mut manifest = Manifest::new(cli.command.name(), cfg.seed);
    let result = commands::dispatch(&cli.command, &cfg, &dir, &mut manifest);
    match &result {
        Ok(()) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.exit_code = e.exit_code();
            manifest.error = Some(e.to_string());
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    result
}

#[cfg(test)]
mod tests;
