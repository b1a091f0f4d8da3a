use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB_SIZE;
use super::ModelError;

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Hidden width of the MLP; `4 * d_model` unless overridden.
    pub d_ff: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            context: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.d_model == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.context == 0 {
            return bad("d_ff and context must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
