//! White-box hallucination detection from generation traces.
//!
//! Each trace yields a lookback-ratio block (how much each head attends to
//! the prompt versus its own output) and a logit-lens block (how confidently
//! each layer predicts the emitted token). Both are pooled over tokens,
//! concatenated as `[LR, LL]` and fed to a small classifier.

pub mod classifier;
pub mod corpus;
pub mod features;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classifier::{
    train_classifier, ClassifierKind, ClassifierSpec, Dense, Detector, FitReport, Network, Prediction, Standardizer,
};
pub use corpus::{build_contrast_corpus, ContrastCorpus, ContrastCorpusConfig};
pub use features::{
    featurize, logit_lens_extract, lookback_ratio, lookback_ratio_extract, pool, FeatureSet, LensFeatures,
    LogitLensMatrix, LookbackTensor, Pooling,
};

use crate::model::GenerationTrace;
use crate::numcore::NumError;
use crate::util::mix64;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("trace has no generated tokens")]
    EmptyTrace,
    #[error("attention row for head {head}, layer {layer}, step {step} sums to {sum}")]
    Unnormalized {
        head: usize,
        layer: usize,
        step: usize,
        sum: f64,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("cannot pool over an empty token dimension")]
    EmptyTokens,
    #[error("feature rows have different lengths")]
    Ragged,
    #[error("features contain a non-finite value")]
    NonFiniteFeature,
    #[error("no samples")]
    EmptyInput,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature length {actual} does not match the trained length {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid classifier spec: {0}")]
    InvalidSpec(String),
    #[error("classifier training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

/// True/false positive and negative counts for the hallucinated class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 of the positive (hallucinated) class.
pub fn prf1(labels: &[bool], predictions: &[bool]) -> Result<Prf1, DetectError> {
    if labels.len() != predictions.len() {
        return Err(DetectError::LengthMismatch {
            features: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok(Prf1 {
        precision,
        recall,
        f1: f1_from(precision, recall),
        confusion: c,
    })
}

/// A generation trace with its hallucination label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub id: String,
    pub label: bool,
    pub trace: GenerationTrace,
}

/// One line of a features file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub features: Vec<f32>,
    pub label: bool,
}

/// Feature vectors selected by `spec` for every trace, in order.
pub fn featurize_all(traces: &[LabeledTrace], spec: &ClassifierSpec) -> Result<Vec<Vec<f64>>, DetectError> {
    traces
        .iter()
        .map(|t| {
            Ok(featurize(&t.trace, spec.pooling, spec.log_space)?
                .select(spec.features)
                .to_vec())
        })
        .collect()
}

pub fn feature_rows(traces: &[LabeledTrace], spec: &ClassifierSpec) -> Result<Vec<FeatureRow>, DetectError> {
    let feats = featurize_all(traces, spec)?;
    Ok(traces
        .iter()
        .zip(feats)
        .map(|(t, f)| FeatureRow {
            id: t.id.clone(),
            features: f.into_iter().map(|x| x as f32).collect(),
            label: t.label,
        })
        .collect())
}

pub fn write_feature_rows(path: &Path, rows: &[FeatureRow]) -> Result<(), DetectError> {
    let io = |source| DetectError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("rows serialize")).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_feature_rows(path: &Path) -> Result<Vec<FeatureRow>, DetectError> {
    let content = std::fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&content, &path.display().to_string())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(content: &str, path: &str) -> Result<Vec<T>, DetectError> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DetectError::Parse {
                path: path.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_traces(path: &Path) -> Result<Vec<LabeledTrace>, DetectError> {
    let content = std::fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&content, &path.display().to_string())
}

pub fn write_traces(path: &Path, traces: &[LabeledTrace]) -> Result<(), DetectError> {
    let io = |source| DetectError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for t in traces {
        writeln!(f, "{}", serde_json::to_string(t).expect("traces serialize")).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// `k` distinct indices of `0..n` chosen with `seed`, in increasing order.
/// All indices when `k >= n`.
pub fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Seeded split into `(train, test)` index lists with `test_count` test
/// items, each list in increasing order.
pub fn split_indices(n: usize, test_count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let test = subsample(n, test_count, seed);
    let mut is_test = vec![false; n];
    for &i in &test {
        is_test[i] = true;
    }
    ((0..n).filter(|&i| !is_test[i]).collect(), test)
}

/// Scores of one classifier configuration on a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub spec: ClassifierSpec,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub confusion: Confusion,
    pub fit: FitReport,
}

/// Trains on `train` and scores on `test` with the features `spec` selects.
pub fn evaluate_detector(
    train: &[LabeledTrace],
    test: &[LabeledTrace],
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<(Detector, DetectionReport), DetectError> {
    let xs = featurize_all(train, spec)?;
    let ys: Vec<bool> = train.iter().map(|t| t.label).collect();
    let (det, fit) = train_classifier(&xs, &ys, spec, seed)?;
    let test_x = featurize_all(test, spec)?;
    let preds: Vec<bool> = det.predict_batch(&test_x)?.iter().map(|p| p.label).collect();
    let labels: Vec<bool> = test.iter().map(|t| t.label).collect();
    let s = prf1(&labels, &preds)?;
    let report = DetectionReport {
        spec: spec.clone(),
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        confusion: s.confusion,
        fit,
    };
    Ok((det, report))
}

/// Every classifier kind crossed with every pooling strategy, on `base`'s
/// other settings.
pub fn run_grid(
    train: &[LabeledTrace],
    test: &[LabeledTrace],
    base: &ClassifierSpec,
    seed: u64,
) -> Result<Vec<DetectionReport>, DetectError> {
    let mut out = Vec::with_capacity(9);
    for kind in ClassifierKind::ALL {
        for pooling in Pooling::ALL {
            let spec = ClassifierSpec {
                kind,
                pooling,
                ..base.clone()
            };
            out.push(evaluate_detector(train, test, &spec, seed)?.1);
        }
    }
    Ok(out)
}

/// Outcome of retraining on shuffled labels, against the F1 of random
/// guessing at the same positive rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationControl {
    /// Mean test F1 over the permuted-label rounds.
    pub f1: f64,
    /// Mean F1 of label-independent guessing at each round's positive rate.
    pub chance: f64,
    /// Root mean square of the per-round guessing standard deviations.
    pub sigma: f64,
    pub rounds: usize,
}

impl PermutationControl {
    /// Within `chance ± 3σ`.
    pub fn within_chance(&self) -> bool {
        (self.f1 - self.chance).abs() <= 3.0 * self.sigma
    }
}

/// Trains `rounds` detectors on shuffled training labels and compares their
/// mean test F1 with random guessing.
pub fn permutation_control(
    train: &[LabeledTrace],
    test: &[LabeledTrace],
    spec: &ClassifierSpec,
    rounds: usize,
    seed: u64,
) -> Result<PermutationControl, DetectError> {
    let xs = featurize_all(train, spec)?;
    let test_x = featurize_all(test, spec)?;
    let labels: Vec<bool> = test.iter().map(|t| t.label).collect();
    let rounds = rounds.max(1);
    let (mut f1, mut chance, mut var) = (0.0, 0.0, 0.0);
    for r in 0..rounds {
        let mut ys: Vec<bool> = train.iter().map(|t| t.label).collect();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(&[seed, r as u64])));
        let (det, _) = train_classifier(&xs, &ys, spec, mix64(&[seed, r as u64, 1]))?;
        let preds: Vec<bool> = det.predict_batch(&test_x)?.iter().map(|p| p.label).collect();
        let rate = preds.iter().filter(|&&p| p).count() as f64 / preds.len().max(1) as f64;
        let (c, s) = guessing_f1(&labels, rate, 1000, mix64(&[seed, r as u64, 2]))?;
        f1 += prf1(&labels, &preds)?.f1;
        chance += c;
        var += s * s;
    }
    let n = rounds as f64;
    Ok(PermutationControl {
        f1: f1 / n,
        chance: chance / n,
        sigma: (var / n).sqrt(),
        rounds,
    })
}

/// Mean and standard deviation of the F1 obtained by predicting positive
/// independently with probability `rate`, over `draws` simulations.
pub fn guessing_f1(labels: &[bool], rate: f64, draws: usize, seed: u64) -> Result<(f64, f64), DetectError> {
    if labels.is_empty() || draws == 0 {
        return Err(DetectError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = rate.clamp(0.0, 1.0);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let preds: Vec<bool> = labels.iter().map(|_| rng.gen_bool(rate)).collect();
        vals.push(prf1(labels, &preds)?.f1);
    }
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
    Ok((mean, var.sqrt()))
}
