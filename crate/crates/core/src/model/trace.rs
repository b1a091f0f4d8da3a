use serde::{Deserialize, Serialize};

use super::forward::{self, ForwardVars, Trainable};
use super::{Model, ModelError};
use crate::numcore::{ops, Graph, Scalar, Tensor};

/// Internals captured while emitting one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub token: u32,
    /// Probability of `token` under the model output distribution.
    pub output_prob: f64,
    /// Logit-lens probability of `token` read from each block's output.
    pub lens_probs: Vec<f64>,
    /// `[layer][head][position]` attention of the query over all positions
    /// up to and including itself.
    pub attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub steps: Vec<TraceStep>,
    /// Set when generation stopped because the context was full.
    pub truncated: bool,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.steps.first().map_or(0, |s| s.lens_probs.len())
    }

    pub fn heads(&self) -> usize {
        self.steps
            .first()
            .and_then(|s| s.attention.first())
            .map_or(0, |h| h.len())
    }
}

fn softmax_prob<T: Scalar>(row: &[T], token: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    (row[token].as_f64() - max).exp() / sum
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Model<T> {
    /// Final-norm + unembedding applied to rows `start..end` of `hidden`.
    fn lens_logits(&self, hidden: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>, ModelError> {
        let d = self.config.d_model;
        let rows = Tensor::new(vec![end - start, d], hidden.data()[start * d..end * d].to_vec())?;
        let (normed, _, _) = ops::layer_norm(&rows, &self.params.ln_f_gain, &self.params.ln_f_bias)?;
        Ok(ops::matmul(&normed, &self.params.unembed)?)
    }

    fn record(&self, ids: &[u32]) -> Result<(Graph<T>, ForwardVars), ModelError> {
        let mut g = Graph::new();
        let bound = forward::bind(&mut g, &self.params, self.lora.as_ref(), Trainable::Nothing)?;
        let fv = forward::forward(&mut g, &self.config, &bound, ids, None)?;
        Ok((g, fv))
    }

    /// Builds trace steps for query rows `first..first + tokens.len()`, where
    /// row `first + i` predicts `tokens[i]`.
    fn steps_at(
        &self,
        g: &Graph<T>,
        fv: &ForwardVars,
        n: usize,
        first: usize,
        tokens: &[u32],
    ) -> Result<Vec<TraceStep>, ModelError> {
        let v = self.config.vocab_size;
        let end = first + tokens.len();
        let mut lens = Vec::with_capacity(fv.layer_outputs.len());
        for &h in &fv.layer_outputs {
            lens.push(self.lens_logits(g.value(h), first, end)?);
        }
        let mut steps = Vec::with_capacity(tokens.len());
        for (i, &tok) in tokens.iter().enumerate() {
            let lens_probs: Vec<f64> = lens
                .iter()
                .map(|l| softmax_prob(&l.data()[i * v..(i + 1) * v], tok as usize))
                .collect();
            let output_prob = *lens_probs.last().expect("at least one layer");
            let pos = first + i;
            let attention = fv
                .attention
                .iter()
                .map(|&a| {
                    let probs = g.attention_probs(a).expect("attention node");
                    (0..self.config.heads)
                        .map(|h| {
                            let base = h * n * n + pos * n;
                            probs[base..=base + pos].iter().map(|p| p.as_f64()).collect()
                        })
                        .collect()
                })
                .collect();
            steps.push(TraceStep {
                token: tok,
                output_prob,
                lens_probs,
                attention,
            });
        }
        Ok(steps)
    }

    /// Greedy decoding (ties go to the lowest id). Stops after `max_new`
    /// tokens, after emitting `stop`, or when the context is full; the last
    /// case sets `truncated`.
    pub fn generate_with_trace(
        &self,
        prompt: &[u32],
        max_new: usize,
        stop: Option<u32>,
    ) -> Result<(Vec<u32>, GenerationTrace), ModelError> {
        forward::check_ids(&self.config, prompt)?;
        let mut ids = prompt.to_vec();
        let mut steps = Vec::new();
        let mut truncated = false;
        for _ in 0..max_new {
            if ids.len() > self.config.context {
                truncated = true;
                break;
            }
            let n = ids.len();
            let (g, fv) = self.record(&ids)?;
            let last = g.value(*fv.layer_outputs.last().expect("at least one layer"));
            let logits = self.lens_logits(last, n - 1, n)?;
            let token = argmax(logits.data()) as u32;
            steps.extend(self.steps_at(&g, &fv, n, n - 1, &[token])?);
            ids.push(token);
            if stop == Some(token) {
                break;
            }
        }
        let generated = ids[prompt.len()..].to_vec();
        let trace = GenerationTrace {
            prompt: prompt.to_vec(),
            generated: generated.clone(),
            steps,
            truncated,
        };
        Ok((generated, trace))
    }

    /// Trace of the model reading a fixed `response` after `prompt`, from a
    /// single forward pass.
    pub fn trace_forced(&self, prompt: &[u32], response: &[u32]) -> Result<GenerationTrace, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if response.is_empty() {
            return Err(ModelError::EmptyResponse);
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&response[..response.len() - 1]);
        forward::check_ids(&self.config, response)?;
        let (g, fv) = self.record(&ids)?;
        let steps = self.steps_at(&g, &fv, ids.len(), prompt.len() - 1, response)?;
        Ok(GenerationTrace {
            prompt: prompt.to_vec(),
            generated: response.to_vec(),
            steps,
            truncated: false,
        })
    }
}
