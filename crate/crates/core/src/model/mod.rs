//! Small decoder-only transformer over bytes.
//!
//! Pre-norm blocks (attention then GELU MLP), learned positions, a final
//! layer norm and an untied unembedding. Optional low-rank adapters on every
//! projection. Generation records per-layer logit-lens probabilities and
//! attention rows for later feature extraction.

pub mod checkpoint;
mod config;
pub mod forward;
mod lora;
mod params;
pub mod tokenizer;
mod trace;

pub use config::ModelConfig;
pub use lora::{merge_lora, LoraAdapter, LoraConfig, LoraFactors, LoraPair};
pub use params::{Block, LoraTarget, ParamSet, Params};
pub use trace::{GenerationTrace, TraceStep};

use crate::numcore::{Graph, NumError, Scalar, Tensor};
use forward::Trainable;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("tensor {name}: expected shape {expected:?}, found {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights plus an optional adapter composed at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Params<T>, lora: Option<LoraAdapter<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_shapes(&config)?;
        if let Some(l) = &lora {
            l.check_shapes(&config)?;
        }
        Ok(Self { config, params, lora })
    }

    /// Randomly initialised model without an adapter.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let params = Params::init(&config)?;
        Self::new(config, params, None)
    }

    /// Attaches a freshly initialised adapter.
    pub fn with_new_lora(mut self, lora: &LoraConfig, seed: u64) -> Result<Self, ModelError> {
        self.lora = Some(LoraAdapter::init(&self.config, lora, seed)?);
        Ok(self)
    }

    /// Same function with the adapter baked into the base weights.
    pub fn merged(&self) -> Result<Self, ModelError> {
        match &self.lora {
            Some(l) => Self::new(self.config, merge_lora(&self.config, &self.params, l)?, None),
            None => Ok(self.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            lora: self.lora.as_ref().map(|l| l.cast()),
        }
    }

    /// Output logits `[n, V]` for every position of `ids`.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let bound = forward::bind(&mut g, &self.params, self.lora.as_ref(), Trainable::Nothing)?;
        let fv = forward::forward(&mut g, &self.config, &bound, ids, None)?;
        let last = *fv.layer_outputs.last().expect("at least one layer");
        let out = forward::logits_rows(&mut g, &bound, last, 0, ids.len())?;
        Ok(g.value(out).clone())
    }

    /// `Σ_t log p(response_t | prompt, response_<t)` in evaluation mode.
    pub fn sequence_logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let bound = forward::bind(&mut g, &self.params, self.lora.as_ref(), Trainable::Nothing)?;
        let lp = forward::sequence_logprob_var(&mut g, &self.config, &bound, prompt, response, None)?;
        Ok(g.value(lp).item()?.as_f64())
    }

    /// Greedy text generation from `[BOS] + prompt`, stopping at EOS.
    pub fn generate_text(&self, prompt: &str, max_new: usize) -> Result<(String, GenerationTrace), ModelError> {
        let ids = tokenizer::encode_prompt(prompt);
        let (out, trace) = self.generate_with_trace(&ids, max_new, Some(tokenizer::EOS))?;
        Ok((tokenizer::detokenize(&out), trace))
    }
}
