//! Finetuning loop for SFT and the DPO family.
//!
//! Reference log-probabilities come from a frozen copy of the initial model
//! and are computed once. Each optimizer step accumulates gradients over
//! micro-batches that together form one effective batch. After every epoch
//! the model is validated and a checkpoint is emitted.

mod log;
mod optim;
mod schedule;
mod sweep;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use log::{EntryKind, MetricEntry, MetricLog};
pub use optim::{AdamConfig, AdamW};
pub use schedule::{lr_at, warmup_steps};
pub use sweep::{beta_grid, sweep_beta, BetaSweepReport, BetaSweepRow};

use crate::datagen::PreferenceRecord;
use crate::eval::{faithfulness_score, EvalError, Judge};
use crate::model::forward::{self, DropoutSeed, Trainable};
use crate::model::{checkpoint, tokenizer, LoraConfig, Model, ModelError};
use crate::numcore::{Graph, NumError, Scalar, Tensor, Var};
use crate::objectives::{
    add_dpo_graph, dpo_graph, pl_dpo_graph, sep_dpo_expand, sft_graph, DivisorMode, Objective, ObjectiveError,
    SampleVars,
};
use crate::util::{derive_seed, mix64};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("total step count is zero")]
    ZeroTotalSteps,
    #[error("step {step} is outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss at step {step} on samples {ids:?}")]
    NonFinite { step: usize, ids: Vec<String> },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("gradient for {tensor} has {actual} values, expected {expected}")]
    GradientShape {
        tensor: String,
        expected: usize,
        actual: usize,
    },
    #[error("record {id}: {len} tokens exceed context length {context}")]
    TooLong { id: String, len: usize, context: usize },
    #[error("record {id} has no rejected responses")]
    NoRejected { id: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// True for overflow or NaN anywhere in the numeric stack.
    pub fn is_non_finite(&self) -> bool {
        let num = |e: &NumError| matches!(e, NumError::NonFinite { .. });
        let model = |e: &ModelError| matches!(e, ModelError::Num(n) if num(n));
        match self {
            Self::NonFinite { .. } => true,
            Self::Num(e) => num(e),
            Self::Model(e) => model(e),
            Self::Objective(ObjectiveError::Num(e)) => num(e),
            Self::Objective(ObjectiveError::Model(e)) => model(e),
            _ => false,
        }
    }
}

/// Quantity used to rank checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValMetric {
    /// Mean faithfulness of greedy generations on validation prompts.
    #[default]
    Faithfulness,
    /// Mean held-out reward margin `r_w - r_l`.
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    /// Peak learning rate.
    pub lr: f64,
    /// Effective batch size per optimizer step.
    pub batch_size: usize,
    /// Samples per forward graph; 0 means the whole batch at once.
    pub micro_batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Adapter settings; with `enabled = false` every base weight is trained.
    pub lora: LoraConfig,
    /// Add-DPO denominator.
    pub divisor: DivisorMode,
    pub adam: AdamConfig,
    pub val_metric: ValMetric,
    /// Validation records to generate for when ranking by faithfulness.
    pub val_generations: usize,
    pub val_max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dpo,
            beta: 0.5,
            lr: 1e-4,
            batch_size: 4,
            micro_batch: 0,
            epochs: 10,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            seed: 0,
            lora: LoraConfig::default(),
            divisor: DivisorMode::default(),
            adam: AdamConfig::default(),
            val_metric: ValMetric::default(),
            val_generations: 8,
            val_max_new_tokens: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad(format!(
                "warmup ratio {} must lie strictly between 0 and 1",
                self.warmup_ratio
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return bad(format!("invalid Adam settings {:?}", self.adam));
        }
        if self.lora.enabled {
            self.lora.validate()?;
        }
        Ok(())
    }

    fn micro(&self) -> usize {
        if self.micro_batch == 0 {
            self.batch_size
        } else {
            self.micro_batch.min(self.batch_size)
        }
    }

    fn trainable(&self) -> Trainable {
        if self.lora.enabled {
            Trainable::Adapter
        } else {
            Trainable::Base
        }
    }
}

/// Optimizer steps for `n` samples: `epochs * ceil(n / batch_size)`.
pub fn total_steps(n: usize, config: &TrainConfig) -> usize {
    config.epochs * n.div_ceil(config.batch_size)
}

/// One tokenized training sample with cached reference log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<Vec<u32>>,
    pub ref_chosen: f64,
    pub ref_rejected: Vec<f64>,
}

/// Response tokens: the UTF-8 bytes followed by EOS.
pub fn response_tokens(text: &str) -> Vec<u32> {
    let mut ids = tokenizer::tokenize(text);
    ids.push(tokenizer::EOS);
    ids
}

/// Records as seen by `objective`: sep-dpo splits extended records into
/// pairs, everything else passes through.
pub fn expand_for(objective: Objective, records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    match objective {
        Objective::SepDpo => records.iter().flat_map(sep_dpo_expand).collect(),
        _ => records.to_vec(),
    }
}

/// Tokenizes `records` and caches reference log-probabilities under
/// `reference` in evaluation mode.
pub fn prepare_examples<T: Scalar>(
    reference: &Model<T>,
    records: &[PreferenceRecord],
) -> Result<Vec<Example>, TrainError> {
    let context = reference.config.context;
    records
        .iter()
        .map(|r| {
            if r.rejected.is_empty() {
                return Err(TrainError::NoRejected { id: r.id.clone() });
            }
            let prompt = tokenizer::encode_prompt(&r.prompt);
            let chosen = response_tokens(&r.chosen);
            let rejected: Vec<Vec<u32>> = r.rejected.iter().map(|x| response_tokens(&x.text)).collect();
            let longest = rejected.iter().map(Vec::len).chain([chosen.len()]).max().unwrap_or(0);
            if prompt.len() + longest > context {
                return Err(TrainError::TooLong {
                    id: r.id.clone(),
                    len: prompt.len() + longest,
                    context,
                });
            }
            let ref_chosen = reference.sequence_logprob(&prompt, &chosen)?;
            let ref_rejected = rejected
                .iter()
                .map(|x| reference.sequence_logprob(&prompt, x))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Example {
                id: r.id.clone(),
                prompt,
                chosen,
                rejected,
                ref_chosen,
                ref_rejected,
            })
        })
        .collect()
}

fn check_arity<'a>(objective: Objective, mut examples: impl Iterator<Item = &'a Example>) -> Result<(), TrainError> {
    if matches!(objective, Objective::Dpo | Objective::SepDpo) {
        if let Some(e) = examples.find(|e| e.rejected.len() != 1) {
            return Err(ObjectiveError::WrongArity { got: e.rejected.len() }.into());
        }
    }
    Ok(())
}

/// Names of the tensors `trainable` selects, in binding order.
fn trainable_vars(bound: &forward::Bound, trainable: Trainable) -> Vec<(String, Var)> {
    match trainable {
        Trainable::Nothing => Vec::new(),
        Trainable::Base => bound.params.entries().into_iter().map(|(n, v)| (n, *v)).collect(),
        Trainable::Adapter => bound
            .lora
            .as_ref()
            .map(|l| l.factors.entries().into_iter().map(|(n, v)| (n, *v)).collect())
            .unwrap_or_default(),
    }
}

/// Mutable views of the tensors `trainable` selects, in binding order.
pub fn trainable_tensors<T: Scalar>(model: &mut Model<T>, trainable: Trainable) -> Vec<(String, &mut Tensor<T>)> {
    match trainable {
        Trainable::Nothing => Vec::new(),
        Trainable::Base => model.params.entries_mut(),
        Trainable::Adapter => model.lora.as_mut().map(|l| l.factors.entries_mut()).unwrap_or_default(),
    }
}

/// Loss of one effective batch and its gradient for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub names: Vec<String>,
    pub grads: Vec<Vec<f64>>,
}

fn dropout_seed(key: Option<u64>, sample: usize, response: usize) -> Option<DropoutSeed> {
    key.map(|k| DropoutSeed(mix64(&[k, sample as u64, response as u64])))
}

/// Records the objective over `batch[offset..offset + len]` as one mean loss.
fn micro_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &forward::Bound,
    batch: &[&Example],
    offset: usize,
    config: &TrainConfig,
    dropout_key: Option<u64>,
) -> Result<Var, TrainError> {
    let cfg = &model.config;
    if config.objective == Objective::Sft {
        let mut terms = Vec::with_capacity(batch.len());
        for (i, e) in batch.iter().enumerate() {
            let d = dropout_seed(dropout_key, offset + i, 0);
            terms.push(sft_graph(g, cfg, bound, &e.prompt, &e.chosen, d)?);
        }
        let stacked = g.stack(&terms)?;
        return Ok(g.mean(stacked)?);
    }
    let mut samples = Vec::with_capacity(batch.len());
    for (i, e) in batch.iter().enumerate() {
        let d = dropout_seed(dropout_key, offset + i, 0);
        let chosen_policy = forward::sequence_logprob_var(g, cfg, bound, &e.prompt, &e.chosen, d)?;
        let chosen_reference = g.scalar_const(e.ref_chosen)?;
        let mut rejected = Vec::with_capacity(e.rejected.len());
        for (j, (r, &rr)) in e.rejected.iter().zip(&e.ref_rejected).enumerate() {
            let d = dropout_seed(dropout_key, offset + i, j + 1);
            let p = forward::sequence_logprob_var(g, cfg, bound, &e.prompt, r, d)?;
            rejected.push((p, g.scalar_const(rr)?));
        }
        samples.push(SampleVars {
            chosen_policy,
            chosen_reference,
            rejected,
        });
    }
    Ok(match config.objective {
        Objective::Dpo | Objective::SepDpo => dpo_graph(g, &samples, config.beta)?.0,
        Objective::AddDpo => add_dpo_graph(g, &samples, config.beta, config.divisor)?,
        Objective::PlDpo => pl_dpo_graph(g, &samples, config.beta)?,
        Objective::Sft => unreachable!("handled above"),
    })
}

/// Mean loss over `batch` and its gradients, accumulated over micro-batches
/// of `micro_batch` samples. `dropout_key` enables adapter dropout.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[&Example],
    config: &TrainConfig,
    trainable: Trainable,
    micro_batch: usize,
    dropout_key: Option<u64>,
) -> Result<BatchGradients, TrainError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch.into());
    }
    check_arity(config.objective, batch.iter().copied())?;
    let micro = micro_batch.clamp(1, batch.len());
    let mut loss = 0.0;
    let mut names = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for (c, chunk) in batch.chunks(micro).enumerate() {
        let mut g = Graph::new();
        let bound = forward::bind(&mut g, &model.params, model.lora.as_ref(), trainable)?;
        let vars = trainable_vars(&bound, trainable);
        let non_finite = |e: TrainError| {
            if e.is_non_finite() {
                TrainError::NonFinite {
                    step: 0,
                    ids: chunk.iter().map(|x| x.id.clone()).collect(),
                }
            } else {
                e
            }
        };
        let weight = chunk.len() as f64 / batch.len() as f64;
        let scaled = micro_loss(&mut g, model, &bound, chunk, c * micro, config, dropout_key)
            .and_then(|mean| Ok(g.scale(mean, weight)?))
            .map_err(non_finite)?;
        loss += g.value(scaled).item()?.as_f64();
        let gr = g.backward(scaled).map_err(|e| non_finite(e.into()))?;
        if grads.is_empty() {
            names = vars.iter().map(|(n, _)| n.clone()).collect();
            grads = vars.iter().map(|(_, v)| vec![0.0; g.value(*v).len()]).collect();
        }
        for ((_, v), acc) in vars.iter().zip(&mut grads) {
            if let Some(x) = gr.get(*v) {
                for (a, &b) in acc.iter_mut().zip(x) {
                    *a += b.as_f64();
                }
            }
        }
    }
    Ok(BatchGradients { loss, names, grads })
}

/// Mean objective over `examples` in evaluation mode, in one graph.
pub fn dataset_loss<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let refs: Vec<&Example> = examples.iter().collect();
    Ok(batch_gradients(model, &refs, config, Trainable::Nothing, refs.len(), None)?.loss)
}

/// Per-example `β[(π_w - ref_w) - mean_j (π_lj - ref_lj)]` in evaluation mode.
pub fn margins<T: Scalar>(model: &Model<T>, examples: &[Example], beta: f64) -> Result<Vec<f64>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let rw = model.sequence_logprob(&e.prompt, &e.chosen)? - e.ref_chosen;
            let mut rl = 0.0;
            for (r, &rr) in e.rejected.iter().zip(&e.ref_rejected) {
                rl += model.sequence_logprob(&e.prompt, r)? - rr;
            }
            Ok(beta * (rw - rl / e.rejected.len() as f64))
        })
        .collect()
}

/// Mean faithfulness of greedy generations for the first `limit` records,
/// judged against each record's prompt. Generations without statements
/// score 0.
pub fn generation_faithfulness<T: Scalar>(
    model: &Model<T>,
    records: &[PreferenceRecord],
    limit: usize,
    max_new_tokens: usize,
    judge: Judge<'_>,
) -> Result<f64, TrainError> {
    let chosen: Vec<&PreferenceRecord> = records.iter().take(limit).collect();
    if chosen.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in &chosen {
        let (text, _) = model.generate_text(&r.prompt, max_new_tokens)?;
        total += match faithfulness_score(&r.prompt, &text, judge) {
            Ok((f, _)) => f,
            Err(EvalError::NoStatements) => 0.0,
            Err(e) => return Err(e.into()),
        };
    }
    Ok(total / chosen.len() as f64)
}

/// Validation results after `epoch` completed epochs (0 = before training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub epoch: usize,
    pub margin: f64,
    /// Fraction of held-out pairs with a positive margin.
    pub positive_fraction: f64,
    pub faithfulness: Option<f64>,
    pub metric: f64,
}

/// Model state after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    pub metric: f64,
    pub model: Model<T>,
    /// File the snapshot was written to, if any.
    pub path: Option<PathBuf>,
}

/// Highest metric wins; ties go to the earliest epoch and NaN ranks last.
pub fn select_best_checkpoint<T>(checkpoints: &[Checkpoint<T>]) -> Option<&Checkpoint<T>> {
    let mut best: Option<&Checkpoint<T>> = None;
    for c in checkpoints {
        best = match best {
            None => Some(c),
            Some(b) if c.metric.is_nan() => Some(b),
            Some(b) if b.metric.is_nan() || c.metric > b.metric || (c.metric == b.metric && c.epoch < b.epoch) => {
                Some(c)
            }
            keep => keep,
        };
    }
    best
}

/// Where a run writes its artifacts and how validation is judged.
#[derive(Clone, Copy)]
pub struct TrainOptions<'a> {
    pub run_id: &'a str,
    /// Directory for `epoch-<n>.tblm` snapshots.
    pub out_dir: Option<&'a Path>,
    /// Append-only JSON-lines metric log.
    pub log_path: Option<&'a Path>,
    pub judge: Judge<'a>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            run_id: "run",
            out_dir: None,
            log_path: None,
            judge: Judge::Proxy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub checkpoints: Vec<Checkpoint<T>>,
    /// Entry 0 is the untrained model.
    pub validation: Vec<Validation>,
    pub log: Vec<MetricEntry>,
    pub final_model: Model<T>,
    pub total_steps: usize,
}

impl<T> TrainReport<T> {
    pub fn best(&self) -> Option<&Checkpoint<T>> {
        select_best_checkpoint(&self.checkpoints)
    }
}

fn validate_epoch<T: Scalar>(
    model: &Model<T>,
    epoch: usize,
    val_examples: &[Example],
    val_records: &[PreferenceRecord],
    config: &TrainConfig,
    judge: Judge<'_>,
) -> Result<Validation, TrainError> {
    let m = margins(model, val_examples, config.beta)?;
    let margin = if m.is_empty() {
        0.0
    } else {
        m.iter().sum::<f64>() / m.len() as f64
    };
    let positive_fraction = if m.is_empty() {
        0.0
    } else {
        m.iter().filter(|&&x| x > 0.0).count() as f64 / m.len() as f64
    };
    let faithfulness = match config.val_metric {
        ValMetric::Faithfulness => Some(generation_faithfulness(
            model,
            val_records,
            config.val_generations,
            config.val_max_new_tokens,
            judge,
        )?),
        ValMetric::Margin => None,
    };
    Ok(Validation {
        epoch,
        margin,
        positive_fraction,
        faithfulness,
        metric: faithfulness.unwrap_or(margin),
    })
}

/// Per-epoch shuffled sample order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(&[seed, epoch as u64])));
    order
}

/// Finetunes `initial` on `train_records`, validating on `val_records`.
/// An adapter is attached when enabled and absent.
pub fn train<T: Scalar>(
    initial: &Model<T>,
    train_records: &[PreferenceRecord],
    val_records: &[PreferenceRecord],
    config: &TrainConfig,
    options: &TrainOptions<'_>,
) -> Result<TrainReport<T>, TrainError> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = initial.clone();
    if config.lora.enabled && model.lora.is_none() {
        model = model.with_new_lora(&config.lora, derive_seed(config.seed, "lora"))?;
    }
    let trainable = config.trainable();
    let reference = model.clone();
    let examples = prepare_examples(&reference, &expand_for(config.objective, train_records))?;
    check_arity(config.objective, examples.iter())?;
    let val_examples = prepare_examples(&reference, val_records)?;
    let total = total_steps(examples.len(), config);
    let mut log = MetricLog::open(options.run_id, options.log_path)?;
    let mut optimizer = AdamW::new(config.adam, config.weight_decay);
    if let Some(dir) = options.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let v0 = validate_epoch(&model, 0, &val_examples, val_records, config, options.judge)?;
    log.push(MetricEntry::epoch(options.run_id, &v0, 0))?;
    let mut validation = vec![v0];
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(examples.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let lr = lr_at(step, total, config)?;
            let key = Some(mix64(&[config.seed, step as u64]));
            let bg = batch_gradients(&model, &batch, config, trainable, config.micro(), key).map_err(|e| match e {
                TrainError::NonFinite { ids, .. } => TrainError::NonFinite { step, ids },
                other => other,
            })?;
            let mut tensors = trainable_tensors(&mut model, trainable);
            optimizer.step(&mut tensors, &bg.grads, lr)?;
            log.push(MetricEntry::step(options.run_id, epoch + 1, step, bg.loss, lr))?;
            step += 1;
        }
        let v = validate_epoch(&model, epoch + 1, &val_examples, val_records, config, options.judge)?;
        log.push(MetricEntry::epoch(options.run_id, &v, step))?;
        let path = match options.out_dir {
            Some(dir) => {
                let p = dir.join(format!("epoch-{}.tblm", epoch + 1));
                checkpoint::save(&model, &p)?;
                Some(p)
            }
            None => None,
        };
        checkpoints.push(Checkpoint {
            epoch: epoch + 1,
            metric: v.metric,
            model: model.clone(),
            path,
        });
        validation.push(v);
    }
    Ok(TrainReport {
        checkpoints,
        validation,
        log: log.into_entries(),
        final_model: model,
        total_steps: total,
    })
}
