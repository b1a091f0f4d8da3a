//! A labeled trace corpus built from two finetunes of one base model: one
//! taught to summarize its prompt, one taught to emit summaries of unrelated
//! documents. Traces of the second are labeled hallucinated.

use serde::{Deserialize, Serialize};

use super::{DetectError, LabeledTrace};
use crate::datagen::{
    synthetic_docs_sized, HallucinationLevel, PreferenceRecord, PromptStyle, RecordMeta, RejectedResponse, SourceDoc,
};
use crate::model::{tokenizer, Model, ModelConfig};
use crate::objectives::Objective;
use crate::train::{train, TrainConfig, TrainError, TrainOptions, ValMetric};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastCorpusConfig {
    pub model: ModelConfig,
    /// Documents used to finetune each variant.
    pub train_docs: usize,
    /// Held-out documents; each yields one trace per variant.
    pub eval_docs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for ContrastCorpusConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 2,
                heads: 4,
                d_model: 32,
                d_ff: 128,
                context: 320,
                ..ModelConfig::default()
            },
            train_docs: 200,
            eval_docs: 150,
            epochs: 4,
            lr: 3e-3,
            batch_size: 8,
            max_new_tokens: 24,
            seed: 0,
        }
    }
}

/// The two finetuned variants and the traces they produced.
#[derive(Debug, Clone)]
pub struct ContrastCorpus {
    pub faithful: Model<f32>,
    pub ignoring: Model<f32>,
    /// Interleaved faithful (label `false`) and context-ignoring (label
    /// `true`) traces over the held-out documents.
    pub traces: Vec<LabeledTrace>,
}

fn sft_records(docs: &[SourceDoc], ignore_context: bool) -> Vec<PreferenceRecord> {
    let n = docs.len();
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let other = &docs[(i + n / 2 + 1) % n].summary;
            let (chosen, rejected) = if ignore_context {
                (other.clone(), d.summary.clone())
            } else {
                (d.summary.clone(), other.clone())
            };
            PreferenceRecord {
                id: d.id.clone(),
                prompt: PromptStyle::Compact.render(&d.text),
                chosen,
                rejected: vec![RejectedResponse {
                    text: rejected,
                    level: HallucinationLevel::High,
                }],
                meta: RecordMeta {
                    replacements: vec![],
                    seed: 0,
                },
            }
        })
        .collect()
}

fn finetune(
    base: &Model<f32>,
    records: &[PreferenceRecord],
    cfg: &ContrastCorpusConfig,
) -> Result<Model<f32>, TrainError> {
    let mut tc = TrainConfig {
        objective: Objective::Sft,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        val_metric: ValMetric::Margin,
        ..TrainConfig::default()
    };
    tc.lora.enabled = false;
    Ok(train(base, records, &[], &tc, &TrainOptions::default())?.final_model)
}

fn trace_all(
    model: &Model<f32>,
    docs: &[SourceDoc],
    label: bool,
    max_new: usize,
) -> Result<Vec<LabeledTrace>, DetectError> {
    docs.iter()
        .map(|d| {
            let prompt = tokenizer::encode_prompt(&PromptStyle::Compact.render(&d.text));
            let (_, trace) = model
                .generate_with_trace(&prompt, max_new, Some(tokenizer::EOS))
                .map_err(|e| DetectError::Training(e.to_string()))?;
            Ok(LabeledTrace {
                id: format!("{}-{}", d.id, if label { "ignoring" } else { "faithful" }),
                label,
                trace,
            })
        })
        .collect()
}

/// Finetunes both variants from a shared base and traces them on held-out
/// documents.
pub fn build_contrast_corpus(cfg: &ContrastCorpusConfig) -> Result<ContrastCorpus, DetectError> {
    let err = |e: TrainError| DetectError::Training(e.to_string());
    let docs = synthetic_docs_sized(cfg.train_docs + cfg.eval_docs, derive_seed(cfg.seed, "corpus"), 1..=2);
    let (train_docs, eval_docs) = docs.split_at(cfg.train_docs);
    let base = Model::<f32>::init(cfg.model).map_err(|e| DetectError::Training(e.to_string()))?;
    let faithful = finetune(&base, &sft_records(train_docs, false), cfg).map_err(err)?;
    let ignoring = finetune(&base, &sft_records(train_docs, true), cfg).map_err(err)?;
    let clean = trace_all(&faithful, eval_docs, false, cfg.max_new_tokens)?;
    let bad = trace_all(&ignoring, eval_docs, true, cfg.max_new_tokens)?;
    let traces = clean.into_iter().zip(bad).flat_map(|(a, b)| [a, b]).collect();
    Ok(ContrastCorpus {
        faithful,
        ignoring,
        traces,
    })
}
