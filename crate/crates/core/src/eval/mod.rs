//! Summary quality metrics: ROUGE, rubric judging, faithfulness and the
//! balanced score.

pub mod judge;
pub mod rouge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use judge::{band, judge_scores, proxy_scores, statement_verdicts, Judge, JudgeScores, StatementVerdict};
pub use rouge::{lcs_len, rouge_all, rouge_l, rouge_l_tokens, rouge_n, rouge_n_tokens, Prf, RougeScores};

use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("summary has no statements to judge")]
    NoStatements,
    #[error("value out of range: {0}")]
    Range(String),
    #[error("judge reply could not be parsed after a retry: {0:?}")]
    JudgeReply(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Default faithfulness cut-off below which a response counts as
/// hallucinated.
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.9;

/// Share of statements judged supported, with the verdicts.
pub fn faithfulness_score(
    source: &str,
    candidate: &str,
    judge: Judge<'_>,
) -> Result<(f64, Vec<StatementVerdict>), EvalError> {
    let verdicts = statement_verdicts(source, candidate, judge)?;
    if verdicts.is_empty() {
        return Err(EvalError::NoStatements);
    }
    let supported = verdicts.iter().filter(|v| v.supported).count();
    Ok((supported as f64 / verdicts.len() as f64, verdicts))
}

/// `(completeness / 5 + F) / 2`.
pub fn balanced_score(completeness: f64, f_score: f64) -> Result<f64, EvalError> {
    if !(1.0..=5.0).contains(&completeness) {
        return Err(EvalError::Range(format!(
            "completeness {completeness} is outside [1, 5]"
        )));
    }
    if !(0.0..=1.0).contains(&f_score) {
        return Err(EvalError::Range(format!("faithfulness {f_score} is outside [0, 1]")));
    }
    Ok((completeness / 5.0 + f_score) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationLabel {
    Hallucinated,
    Clean,
}

/// Hallucinated when `f_score < threshold`.
pub fn label_by_fscore(f_score: f64, threshold: f64) -> HallucinationLabel {
    if f_score < threshold {
        HallucinationLabel::Hallucinated
    } else {
        HallucinationLabel::Clean
    }
}

/// One summary to score against its source and reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub source: String,
    pub golden: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub rouge: RougeScores,
    pub judge: JudgeScores,
    pub f_score: f64,
    pub b_score: f64,
    pub statements: usize,
    pub label: HallucinationLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub rouge1: MeanStd,
    pub rouge2: MeanStd,
    pub rouge_l: MeanStd,
    pub completeness: MeanStd,
    pub relevance: MeanStd,
    pub coherence: MeanStd,
    pub fluency: MeanStd,
    pub f_score: MeanStd,
    pub b_score: MeanStd,
    pub hallucinated: usize,
    /// Metrics this crate does not compute.
    pub meteor: String,
    pub bertscore: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    /// `proxy` or `external`.
    pub judge: String,
    pub label_threshold: f64,
    pub samples: Vec<SampleReport>,
    pub aggregate: Aggregate,
}

pub fn evaluate_sample(sample: &EvalSample, judge: Judge<'_>, threshold: f64) -> Result<SampleReport, EvalError> {
    let scores = judge_scores(&sample.source, &sample.golden, &sample.candidate, judge)?;
    let (f_score, verdicts) = faithfulness_score(&sample.source, &sample.candidate, judge)?;
    Ok(SampleReport {
        id: sample.id.clone(),
        rouge: rouge_all(&sample.golden, &sample.candidate),
        judge: scores,
        f_score,
        b_score: balanced_score(f64::from(scores.completeness), f_score)?,
        statements: verdicts.len(),
        label: label_by_fscore(f_score, threshold),
    })
}

pub fn aggregate(samples: &[SampleReport]) -> Aggregate {
    let col = |f: fn(&SampleReport) -> f64| MeanStd::of(samples.iter().map(f));
    Aggregate {
        count: samples.len(),
        rouge1: col(|s| s.rouge.rouge1.f1),
        rouge2: col(|s| s.rouge.rouge2.f1),
        rouge_l: col(|s| s.rouge.rouge_l.f1),
        completeness: col(|s| f64::from(s.judge.completeness)),
        relevance: col(|s| f64::from(s.judge.relevance)),
        coherence: col(|s| f64::from(s.judge.coherence)),
        fluency: col(|s| f64::from(s.judge.fluency)),
        f_score: col(|s| s.f_score),
        b_score: col(|s| s.b_score),
        hallucinated: samples
            .iter()
            .filter(|s| s.label == HallucinationLabel::Hallucinated)
            .count(),
        meteor: "not computed".into(),
        bertscore: "not computed".into(),
    }
}

pub fn evaluate(samples: &[EvalSample], judge: Judge<'_>, threshold: f64) -> Result<EvalRun, EvalError> {
    let reports = samples
        .iter()
        .map(|s| evaluate_sample(s, judge, threshold))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalRun {
        judge: if judge.is_proxy() { "proxy" } else { "external" }.into(),
        label_threshold: threshold,
        aggregate: aggregate(&reports),
        samples: reports,
    })
}

#[cfg(test)]
mod tests;
