//! Preference objectives on sequence log-probabilities.
//!
//! Every loss is recorded on a [`Graph`] so the trainer can backpropagate into
//! the policy. Reference log-probabilities pass through `detach` and never
//! receive gradient. The `*_loss` functions are pure wrappers over plain
//! numbers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::PreferenceRecord;
use crate::model::forward::{self, Bound, DropoutSeed};
use crate::model::{ModelConfig, ModelError};
use crate::numcore::{Graph, NumError, Scalar, Var};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("plain DPO takes exactly one rejected response per sample, got {got}; use add-dpo or pl-dpo")]
    WrongArity { got: usize },
    #[error("sample {sample} has no rejected responses")]
    EmptyRejected { sample: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("log-probability {0} is positive or non-finite")]
    InvalidLogProb(f64),
    #[error("unknown objective {0:?} (expected sft, dpo, add-dpo, pl-dpo or sep-dpo)")]
    UnknownObjective(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Sft,
    Dpo,
    AddDpo,
    PlDpo,
    SepDpo,
}

impl Objective {
    pub const ALL: [Objective; 5] = [Self::Sft, Self::Dpo, Self::AddDpo, Self::PlDpo, Self::SepDpo];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Dpo => "dpo",
            Self::AddDpo => "add-dpo",
            Self::PlDpo => "pl-dpo",
            Self::SepDpo => "sep-dpo",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| ObjectiveError::UnknownObjective(s.to_string()))
    }
}

/// Denominator of the rejected-ratio aggregate in Add-DPO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivisorMode {
    /// Divide by `k` (number of responses including the chosen one).
    K,
    /// Divide by `k - 1`, a true average over the rejected responses.
    #[default]
    KMinus1,
}

/// Policy and reference log-probability of one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbPair {
    pub policy: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub chosen: LogProbPair,
    pub rejected: Vec<LogProbPair>,
}

/// Log-probabilities consumed by the preference losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatch {
    pub samples: Vec<LossSample>,
    pub beta: f64,
}

/// Graph handles for one sample.
#[derive(Debug, Clone)]
pub struct SampleVars {
    pub chosen_policy: Var,
    pub chosen_reference: Var,
    pub rejected: Vec<(Var, Var)>,
}

/// Loss value and per-sample `r_w - r_l` margins.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    pub margins: Vec<f64>,
}

pub fn log_ratio(beta: f64, policy: f64, reference: f64) -> f64 {
    beta * (policy - reference)
}

fn check_beta(beta: f64) -> Result<(), ObjectiveError> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidBeta(beta))
    }
}

fn ratio_var<T: Scalar>(g: &mut Graph<T>, beta: f64, policy: Var, reference: Var) -> Result<Var, NumError> {
    let r = g.detach(reference)?;
    let d = g.sub(policy, r)?;
    g.scale(d, beta)
}

/// Orders nodes by value so that sums over an unordered rejected set are
/// independent of input order, bit for bit.
fn canonical_order<T: Scalar>(g: &Graph<T>, vars: &mut [Var]) {
    vars.sort_by(|&a, &b| g.value(a).data()[0].as_f64().total_cmp(&g.value(b).data()[0].as_f64()));
}

fn check_samples(samples: &[SampleVars]) -> Result<(), ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if let Some(i) = samples.iter().position(|s| s.rejected.is_empty()) {
        return Err(ObjectiveError::EmptyRejected { sample: i });
    }
    Ok(())
}

/// `mean_i -log σ(r_w - r_l)`; also returns the margin nodes.
pub fn dpo_graph<T: Scalar>(
    g: &mut Graph<T>,
    samples: &[SampleVars],
    beta: f64,
) -> Result<(Var, Vec<Var>), ObjectiveError> {
    check_beta(beta)?;
    check_samples(samples)?;
    if let Some(s) = samples.iter().find(|s| s.rejected.len() != 1) {
        return Err(ObjectiveError::WrongArity { got: s.rejected.len() });
    }
    let mut terms = Vec::with_capacity(samples.len());
    let mut margins = Vec::with_capacity(samples.len());
    for s in samples {
        let rw = ratio_var(g, beta, s.chosen_policy, s.chosen_reference)?;
        let rl = ratio_var(g, beta, s.rejected[0].0, s.rejected[0].1)?;
        let m = g.sub(rw, rl)?;
        margins.push(m);
        let ls = g.log_sigmoid(m)?;
        terms.push(g.neg(ls)?);
    }
    let stacked = g.stack(&terms)?;
    Ok((g.mean(stacked)?, margins))
}

/// `mean_i -log σ(r_w - Σ_j r_{l_j} / divisor)`.
pub fn add_dpo_graph<T: Scalar>(
    g: &mut Graph<T>,
    samples: &[SampleVars],
    beta: f64,
    divisor: DivisorMode,
) -> Result<Var, ObjectiveError> {
    check_beta(beta)?;
    check_samples(samples)?;
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let rw = ratio_var(g, beta, s.chosen_policy, s.chosen_reference)?;
        let mut rls = s
            .rejected
            .iter()
            .map(|&(p, r)| ratio_var(g, beta, p, r))
            .collect::<Result<Vec<_>, _>>()?;
        canonical_order(g, &mut rls);
        let stacked = g.stack(&rls)?;
        let total = g.sum(stacked)?;
        let k_minus_1 = s.rejected.len() as f64;
        let d = match divisor {
            DivisorMode::K => k_minus_1 + 1.0,
            DivisorMode::KMinus1 => k_minus_1,
        };
        let agg = g.scale(total, 1.0 / d)?;
        let m = g.sub(rw, agg)?;
        let ls = g.log_sigmoid(m)?;
        terms.push(g.neg(ls)?);
    }
    let stacked = g.stack(&terms)?;
    Ok(g.mean(stacked)?)
}

/// `mean_i log(1 + Σ_j exp(r_{l_j} - r_w))`, the negative log-probability of
/// the chosen response ranked first against an indifferent rejected set.
pub fn pl_dpo_graph<T: Scalar>(g: &mut Graph<T>, samples: &[SampleVars], beta: f64) -> Result<Var, ObjectiveError> {
    check_beta(beta)?;
    check_samples(samples)?;
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let rw = ratio_var(g, beta, s.chosen_policy, s.chosen_reference)?;
        let mut items = vec![g.scalar_const(0.0)?];
        for &(p, r) in &s.rejected {
            let rl = ratio_var(g, beta, p, r)?;
            items.push(g.sub(rl, rw)?);
        }
        canonical_order(g, &mut items);
        let stacked = g.stack(&items)?;
        terms.push(g.logsumexp(stacked, 0)?);
    }
    let stacked = g.stack(&terms)?;
    Ok(g.mean(stacked)?)
}

/// Mean per-token negative log-likelihood of `chosen`.
pub fn sft_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    bound: &Bound,
    prompt: &[u32],
    chosen: &[u32],
    dropout: Option<DropoutSeed>,
) -> Result<Var, ObjectiveError> {
    if chosen.is_empty() {
        return Err(ModelError::EmptyResponse.into());
    }
    let lp = forward::sequence_logprob_var(g, cfg, bound, prompt, chosen, dropout)?;
    Ok(g.scale(lp, -1.0 / chosen.len() as f64)?)
}

/// Which closed-form loss to evaluate on a [`LossBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceLoss {
    Dpo,
    AddDpo(DivisorMode),
    PlDpo,
}

/// Loss value with gradients with respect to every log-probability input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// Per sample: `d/d policy` for chosen then each rejected.
    pub policy: Vec<Vec<f64>>,
    /// Same layout for the reference log-probabilities.
    pub reference: Vec<Vec<f64>>,
}

impl LossBatch {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        check_beta(self.beta)?;
        if self.samples.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.rejected.is_empty() {
                return Err(ObjectiveError::EmptyRejected { sample: i });
            }
            for p in std::iter::once(&s.chosen).chain(&s.rejected) {
                for v in [p.policy, p.reference] {
                    if !v.is_finite() || v > 0.0 {
                        return Err(ObjectiveError::InvalidLogProb(v));
                    }
                }
            }
        }
        Ok(())
    }

    /// Records the batch on `g`; every input is a trainable leaf.
    pub fn record(&self, g: &mut Graph<f64>) -> Result<Vec<SampleVars>, ObjectiveError> {
        let mut leaf = |v: f64| g.param(crate::numcore::Tensor::scalar(v));
        self.samples
            .iter()
            .map(|s| {
                Ok(SampleVars {
                    chosen_policy: leaf(s.chosen.policy)?,
                    chosen_reference: leaf(s.chosen.reference)?,
                    rejected: s
                        .rejected
                        .iter()
                        .map(|p| Ok((leaf(p.policy)?, leaf(p.reference)?)))
                        .collect::<Result<_, NumError>>()?,
                })
            })
            .collect()
    }

    /// `[r_w, r_l1, ...]` per sample.
    pub fn log_ratios(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                std::iter::once(&s.chosen)
                    .chain(&s.rejected)
                    .map(|p| log_ratio(self.beta, p.policy, p.reference))
                    .collect()
            })
            .collect()
    }
}

fn build(
    g: &mut Graph<f64>,
    batch: &LossBatch,
    kind: PreferenceLoss,
) -> Result<(Var, Vec<SampleVars>, Vec<Var>), ObjectiveError> {
    batch.validate()?;
    let vars = batch.record(g)?;
    let (loss, margins) = match kind {
        PreferenceLoss::Dpo => dpo_graph(g, &vars, batch.beta)?,
        PreferenceLoss::AddDpo(d) => (add_dpo_graph(g, &vars, batch.beta, d)?, Vec::new()),
        PreferenceLoss::PlDpo => (pl_dpo_graph(g, &vars, batch.beta)?, Vec::new()),
    };
    Ok((loss, vars, margins))
}

pub fn dpo_loss(batch: &LossBatch) -> Result<DpoOutput, ObjectiveError> {
    let mut g = Graph::new();
    let (loss, _, margins) = build(&mut g, batch, PreferenceLoss::Dpo)?;
    Ok(DpoOutput {
        loss: g.value(loss).item()?,
        margins: margins.iter().map(|&m| g.value(m).item()).collect::<Result<_, _>>()?,
    })
}

pub fn add_dpo_loss(batch: &LossBatch, divisor: DivisorMode) -> Result<f64, ObjectiveError> {
    preference_loss(batch, PreferenceLoss::AddDpo(divisor))
}

pub fn pl_dpo_loss(batch: &LossBatch) -> Result<f64, ObjectiveError> {
    preference_loss(batch, PreferenceLoss::PlDpo)
}

pub fn preference_loss(batch: &LossBatch, kind: PreferenceLoss) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let (loss, _, _) = build(&mut g, batch, kind)?;
    Ok(g.value(loss).item()?)
}

/// Loss and its gradient with respect to every input log-probability.
pub fn preference_loss_gradients(batch: &LossBatch, kind: PreferenceLoss) -> Result<LossGradients, ObjectiveError> {
    let mut g = Graph::new();
    let (loss, vars, _) = build(&mut g, batch, kind)?;
    let grads = g.backward(loss)?;
    let get = |v: Var| grads.get(v).map_or(0.0, |x| x[0]);
    let policy = vars
        .iter()
        .map(|s| {
            std::iter::once(s.chosen_policy)
                .chain(s.rejected.iter().map(|r| r.0))
                .map(get)
                .collect()
        })
        .collect();
    let reference = vars
        .iter()
        .map(|s| {
            std::iter::once(s.chosen_reference)
                .chain(s.rejected.iter().map(|r| r.1))
                .map(get)
                .collect()
        })
        .collect();
    Ok(LossGradients {
        loss: g.value(loss).item()?,
        policy,
        reference,
    })
}

/// Splits an extended record into one pairwise record per rejected response,
/// preserving order. Ids gain a `#i` suffix when more than one pair results.
pub fn sep_dpo_expand(record: &PreferenceRecord) -> Vec<PreferenceRecord> {
    if record.rejected.len() == 1 {
        return vec![record.clone()];
    }
    record
        .rejected
        .iter()
        .enumerate()
        .map(|(i, r)| PreferenceRecord {
            id: format!("{}#{i}", record.id),
            rejected: vec![r.clone()],
            ..record.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests;
