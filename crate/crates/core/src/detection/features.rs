//! Logit-lens and lookback-ratio features from generation traces.

use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::model::GenerationTrace;

/// Largest tolerated deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Floor applied before taking logs of lens probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// How per-step features are reduced over the token dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    /// Per-feature mean followed by per-feature population standard deviation.
    Statistical,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Self::Mean, Self::Max, Self::Statistical];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Statistical => "statistical",
        }
    }
}

/// Which block of the concatenated features a classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// Lookback ratios only.
    Lr,
    /// Logit-lens probabilities only.
    Ll,
    /// `[LR, LL]`.
    #[default]
    Concat,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [Self::Lr, Self::Ll, Self::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lr => "lr",
            Self::Ll => "ll",
            Self::Concat => "concat",
        }
    }
}

/// `[t][l]` probability of each emitted token read through every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl LogitLensMatrix {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn layers(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Lookback ratios indexed `[h][l][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookbackTensor {
    pub heads: usize,
    pub layers: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl LookbackTensor {
    pub fn get(&self, head: usize, layer: usize, step: usize) -> f64 {
        self.data[(head * self.layers + layer) * self.steps + step]
    }

    /// The `h * l` ratios of one step, head-major.
    pub fn step_vector(&self, step: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.heads * self.layers);
        for h in 0..self.heads {
            for l in 0..self.layers {
                out.push(self.get(h, l, step));
            }
        }
        out
    }

    /// Per-step vectors `[t][h * l]`.
    pub fn step_rows(&self) -> Vec<Vec<f64>> {
        (0..self.steps).map(|t| self.step_vector(t)).collect()
    }
}

/// Lens probability of every emitted token at every layer; log-probabilities
/// when `log_space` is set.
pub fn logit_lens_extract(trace: &GenerationTrace, log_space: bool) -> Result<LogitLensMatrix, DetectError> {
    if trace.steps.is_empty() {
        return Err(DetectError::EmptyTrace);
    }
    let layers = trace.layers();
    let rows = trace
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if s.lens_probs.len() != layers || layers == 0 {
                return Err(DetectError::MalformedTrace(format!(
                    "step {t} has {} lens layers",
                    s.lens_probs.len()
                )));
            }
            Ok(s.lens_probs
                .iter()
                .map(|&p| if log_space { p.max(LOG_FLOOR).ln() } else { p })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LogitLensMatrix { rows })
}

/// `A_ctx / (A_ctx + A_new)` from the mean attention on prompt positions and
/// on previously generated positions. Steps with no generated predecessor
/// give 1.
pub fn lookback_ratio(row: &[f64], prompt_len: usize) -> f64 {
    let (ctx, new) = row.split_at(prompt_len.min(row.len()));
    if new.is_empty() {
        return 1.0;
    }
    let a_ctx = if ctx.is_empty() {
        0.0
    } else {
        ctx.iter().sum::<f64>() / ctx.len() as f64
    };
    let a_new = new.iter().sum::<f64>() / new.len() as f64;
    let denom = a_ctx + a_new;
    if denom <= 0.0 {
        return 0.5;
    }
    (a_ctx / denom).clamp(0.0, 1.0)
}

/// Lookback ratio for every head, layer and generated step.
pub fn lookback_ratio_extract(trace: &GenerationTrace) -> Result<LookbackTensor, DetectError> {
    if trace.steps.is_empty() {
        return Err(DetectError::EmptyTrace);
    }
    let prompt_len = trace.prompt.len();
    if prompt_len == 0 {
        return Err(DetectError::MalformedTrace("empty prompt".into()));
    }
    let (layers, heads, steps) = (trace.steps[0].attention.len(), trace.heads(), trace.steps.len());
    if layers == 0 || heads == 0 {
        return Err(DetectError::MalformedTrace("trace has no attention rows".into()));
    }
    let mut data = vec![0.0; heads * layers * steps];
    for (t, step) in trace.steps.iter().enumerate() {
        if step.attention.len() != layers {
            return Err(DetectError::MalformedTrace(format!(
                "step {t} has {} layers",
                step.attention.len()
            )));
        }
        for (l, per_head) in step.attention.iter().enumerate() {
            if per_head.len() != heads {
                return Err(DetectError::MalformedTrace(format!(
                    "step {t} layer {l} has {} heads",
                    per_head.len()
                )));
            }
            for (h, row) in per_head.iter().enumerate() {
                if row.len() != prompt_len + t {
                    return Err(DetectError::MalformedTrace(format!(
                        "head {h} layer {l} step {t}: row covers {} positions, expected {}",
                        row.len(),
                        prompt_len + t
                    )));
                }
                let sum: f64 = row.iter().sum();
                if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(DetectError::Unnormalized {
                        head: h,
                        layer: l,
                        step: t,
                        sum,
                    });
                }
                data[(h * layers + l) * steps + t] = lookback_ratio(row, prompt_len);
            }
        }
    }
    Ok(LookbackTensor {
        heads,
        layers,
        steps,
        data,
    })
}

/// Reduces `[t][f]` rows over `t`.
pub fn pool(rows: &[Vec<f64>], strategy: Pooling) -> Result<Vec<f64>, DetectError> {
    let first = rows.first().ok_or(DetectError::EmptyTokens)?;
    let f = first.len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(DetectError::Ragged);
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..f).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    Ok(match strategy {
        Pooling::Mean => mean,
        Pooling::Max => (0..f)
            .map(|j| rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Pooling::Statistical => {
            let std = (0..f).map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt());
            let std: Vec<f64> = std.collect();
            mean.into_iter().chain(std).collect()
        }
    })
}

/// Pooled lookback ratios, pooled lens probabilities and their concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensFeatures {
    pub lr: Vec<f64>,
    pub ll: Vec<f64>,
    pub concat: Vec<f64>,
}

impl LensFeatures {
    pub fn select(&self, set: FeatureSet) -> &[f64] {
        match set {
            FeatureSet::Lr => &self.lr,
            FeatureSet::Ll => &self.ll,
            FeatureSet::Concat => &self.concat,
        }
    }
}

pub fn featurize(trace: &GenerationTrace, strategy: Pooling, log_space: bool) -> Result<LensFeatures, DetectError> {
    let lr = pool(&lookback_ratio_extract(trace)?.step_rows(), strategy)?;
    let ll = pool(&logit_lens_extract(trace, log_space)?.rows, strategy)?;
    let concat = lr.iter().chain(&ll).copied().collect();
    Ok(LensFeatures { lr, ll, concat })
}
