//! Run configuration: one TOML file with a section per stage, environment
//! overrides and a resolved snapshot written next to every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::{DatagenConfig, PromptStyle};
use crate::detection::{ClassifierSpec, ContrastCorpusConfig};
use crate::eval::DEFAULT_LABEL_THRESHOLD;
use crate::gateway::GatewayConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Prefix of environment variables that override config keys, e.g.
/// `TRUEBRIEF__TRAIN__BETA=0.3`.
pub const ENV_PREFIX: &str = "TRUEBRIEF__";

/// Sections whose `seed` defaults to the global seed.
const SEEDED: &[&[&str]] = &[
    &["model"],
    &["datagen"],
    &["train"],
    &["gateway"],
    &["detection"],
    &["detection", "corpus"],
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub seed: u64,
    /// `{id, text, summary}` JSON lines; synthetic documents when absent.
    pub input: Option<PathBuf>,
    pub synthetic_docs: usize,
    /// Inclusive sentence-count range of synthetic summaries.
    pub summary_sentences: [usize; 2],
    pub prompt_style: PromptStyle,
    pub entity_stage: bool,
    pub paraphrase_stage: bool,
    pub workers: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            seed: 0,
            input: None,
            synthetic_docs: 240,
            summary_sentences: [1, 2],
            prompt_style: PromptStyle::Compact,
            entity_stage: true,
            paraphrase_stage: true,
            workers: 1,
        }
    }
}

impl DatagenSection {
    pub fn config(&self, extended: bool) -> DatagenConfig {
        DatagenConfig {
            seed: self.seed,
            prompt_style: self.prompt_style,
            entity_stage: self.entity_stage,
            paraphrase_stage: self.paraphrase_stage,
            extended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub seed: u64,
    /// Size of the held-out split.
    pub test_count: usize,
    /// Evaluate every classifier kind and pooling instead of one spec.
    pub grid: bool,
    /// Label-shuffled training rounds; 0 disables the control.
    pub permutation_rounds: usize,
    pub classifier: ClassifierSpec,
    /// Used when no traces or annotated data are given.
    pub corpus: ContrastCorpusConfig,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            seed: 0,
            test_count: 200,
            grid: false,
            permutation_rounds: 10,
            classifier: ClassifierSpec::default(),
            corpus: ContrastCorpusConfig::default(),
        }
    }
}

/// Who scores summaries in the eval command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeMode {
    /// The lexical proxy.
    #[default]
    Proxy,
    /// The configured chat endpoint, or the proxy when offline.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub label_threshold: f64,
    pub judge: JudgeMode,
    /// Generation budget when summaries come from a checkpoint.
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            judge: JudgeMode::Proxy,
            max_new_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every artifact; each command writes to a subdirectory.
    pub output_dir: PathBuf,
    /// Share of preference records held out for validation by `train` and
    /// `sweep-beta`.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub datagen: DatagenSection,
    pub train: TrainConfig,
    pub detection: DetectionSection,
    pub eval: EvalSection,
    pub gateway: GatewayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            val_fraction: 1.0 / 6.0,
            model: ModelConfig::default(),
            datagen: DatagenSection::default(),
            train: TrainConfig::default(),
            detection: DetectionSection::default(),
            eval: EvalSection::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` in `table`, creating intermediate tables.
fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for key in parents {
        let entry = cur.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("{key} is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Applies `TRUEBRIEF__SECTION__KEY=value` overrides.
pub fn apply_env_overrides(
    table: &mut Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (var, raw) in vars {
        let path: Vec<String> = var[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::Env {
                var,
                reason: "empty key segment".into(),
            });
        }
        set_path(table, &path, parse_value(&raw)).map_err(|reason| ConfigError::Env { var, reason })?;
    }
    Ok(())
}

/// Gives every seeded section without an explicit `seed` the global seed.
fn inherit_seeds(table: &mut Table) -> Result<(), ConfigError> {
    let global = match table.get("seed") {
        None => 0,
        Some(Value::Integer(i)) if *i >= 0 => *i,
        Some(other) => {
            return Err(ConfigError::Invalid(format!(
                "seed must be a non-negative integer, got {other}"
            )))
        }
    };
    for path in SEEDED {
        let mut cur = &mut *table;
        for key in *path {
            let entry = cur.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("{key} must be a table")))?;
        }
        cur.entry("seed").or_insert(Value::Integer(global));
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `TRUEBRIEF__*` variables from `env`.
    /// Unknown keys are rejected.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                text.parse::<Table>()
                    .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        apply_env_overrides(&mut table, env)?;
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self, ConfigError> {
        inherit_seeds(&mut table)?;
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(config)
    }

    /// Sets the global seed and every section seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.datagen.seed = seed;
        self.train.seed = seed;
        self.gateway.seed = seed;
        self.detection.seed = seed;
        self.detection.corpus.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.gateway.validate().map_err(|e| invalid(&e))?;
        self.detection.classifier.validate().map_err(|e| invalid(&e))?;
        self.detection.corpus.model.validate().map_err(|e| invalid(&e))?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ConfigError::Invalid("val_fraction must be in [0, 1)".into()));
        }
        let [lo, hi] = self.datagen.summary_sentences;
        if lo == 0 || hi < lo {
            return Err(ConfigError::Invalid(
                "datagen.summary_sentences must be [min, max] with 1 <= min <= max".into(),
            ));
        }
        if self.datagen.workers == 0 {
            return Err(ConfigError::Invalid("datagen.workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.label_threshold) {
            return Err(ConfigError::Invalid("eval.label_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// The resolved configuration as TOML. The API key is never written.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}
