//! Recording the decoder forward pass on a [`Graph`].

use super::lora::{LoraAdapter, LoraFactors};
use super::params::{LoraTarget, ParamSet, Params};
use super::{ModelConfig, ModelError};
use crate::numcore::{Graph, Scalar, Var};
use crate::util::mix64;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which tensors receive gradients when bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter,
}

/// Adapter handles on a graph.
#[derive(Debug, Clone)]
pub struct LoraBinding {
    pub factors: LoraFactors<Var>,
    pub scaling: f64,
    pub dropout: f64,
}

/// Model weights bound to a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: ParamSet<Var>,
    pub lora: Option<LoraBinding>,
}

/// Dropout randomness for one training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSeed(pub u64);

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Residual stream after each block, `[n, d]`.
    pub layer_outputs: Vec<Var>,
    /// Attention nodes, one per block.
    pub attention: Vec<Var>,
}

pub fn bind<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    lora: Option<&LoraAdapter<T>>,
    trainable: Trainable,
) -> Result<Bound, ModelError> {
    let base_grad = trainable == Trainable::Base;
    let params = params.try_map(|_, t| {
        if base_grad {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })?;
    let lora = match lora {
        Some(adapter) => {
            let grad = trainable == Trainable::Adapter;
            let factors = adapter.factors.try_map(|_, t| {
                if grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })?;
            Some(LoraBinding {
                factors,
                scaling: adapter.scaling(),
                dropout: adapter.dropout,
            })
        }
        None => {
            if trainable == Trainable::Adapter {
                return Err(ModelError::InvalidConfig("no adapter to train".into()));
            }
            None
        }
    };
    Ok(Bound { params, lora })
}

/// Binds every base parameter as a slice of the flat vector `x`, laid out in
/// [`ParamSet::entries`] order. Used for gradient checks over all weights.
pub fn bind_flat<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &ModelConfig) -> Result<Bound, ModelError> {
    let shapes = Params::<T>::expected_shapes(cfg);
    let mut offset = 0;
    let params = ParamSet::skeleton(cfg.layers).try_map(|name, _| {
        let shape = &shapes
            .iter()
            .find(|(n, _)| n == name)
            .expect("skeleton names match expected shapes")
            .1;
        let n: usize = shape.iter().product();
        let v = g.slice_flat(x, offset, offset + n, shape)?;
        offset += n;
        Ok::<_, ModelError>(v)
    })?;
    Ok(Bound { params, lora: None })
}

pub fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if ids.len() > cfg.context {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            context: cfg.context,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(len: usize, p: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn project<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    lora: Option<&LoraBinding>,
    layer: usize,
    target: LoraTarget,
    dropout: Option<DropoutSeed>,
) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    let Some(binding) = lora else {
        return Ok(y);
    };
    let pair = binding.factors.get(layer, target);
    let xin = match dropout {
        Some(DropoutSeed(seed)) if binding.dropout > 0.0 => {
            let len = g.value(x).len();
            let mask = dropout_mask(
                len,
                binding.dropout,
                mix64(&[seed, layer as u64, target.index() as u64]),
            );
            g.dropout_mask(x, mask)?
        }
        _ => x,
    };
    let xa = g.matmul(xin, pair.a)?;
    let xab = g.matmul(xa, pair.b)?;
    let delta = g.scale(xab, binding.scaling)?;
    Ok(g.add(y, delta)?)
}

/// Records the transformer over `ids`. `dropout` is `Some` only in training.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[u32],
    dropout: Option<DropoutSeed>,
) -> Result<ForwardVars, ModelError> {
    check_ids(cfg, ids)?;
    let p = &bound.params;
    let lora = bound.lora.as_ref();
    let tokens: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let te = g.embedding(p.tok_emb, &tokens)?;
    let pe = g.embedding(p.pos_emb, &positions)?;
    let mut x = g.add(te, pe)?;
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, b) in p.blocks.iter().enumerate() {
        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
        let q = project(g, h, b.wq, lora, l, LoraTarget::Q, dropout)?;
        let k = project(g, h, b.wk, lora, l, LoraTarget::K, dropout)?;
        let v = project(g, h, b.wv, lora, l, LoraTarget::V, dropout)?;
        let a = g.causal_attention(q, k, v, cfg.heads)?;
        attention.push(a);
        let o = project(g, a, b.wo, lora, l, LoraTarget::O, dropout)?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
        let up = project(g, h2, b.w_up, lora, l, LoraTarget::Up, dropout)?;
        let act = g.gelu(up)?;
        let down = project(g, act, b.w_down, lora, l, LoraTarget::Down, dropout)?;
        x = g.add(x, down)?;
        layer_outputs.push(x);
    }
    Ok(ForwardVars {
        layer_outputs,
        attention,
    })
}

/// Logits `[end - start, V]` for rows `start..end` of a hidden state.
pub fn logits_rows<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    hidden: Var,
    start: usize,
    end: usize,
) -> Result<Var, ModelError> {
    let p = &bound.params;
    let rows = g.slice_rows(hidden, start, end)?;
    let normed = g.layer_norm(rows, p.ln_f_gain, p.ln_f_bias)?;
    Ok(g.matmul(normed, p.unembed)?)
}

/// `log p(response | prompt)` as a scalar graph node.
pub fn sequence_logprob_var<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    bound: &Bound,
    prompt: &[u32],
    response: &[u32],
    dropout: Option<DropoutSeed>,
) -> Result<Var, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let total = prompt.len() + response.len();
    if total > cfg.context {
        return Err(ModelError::ContextOverflow {
            len: total,
            context: cfg.context,
        });
    }
    if response.is_empty() {
        return Ok(g.scalar_const(0.0)?);
    }
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&response[..response.len() - 1]);
    check_ids(cfg, response)?;
    let fv = forward(g, cfg, bound, &ids, dropout)?;
    let last = *fv.layer_outputs.last().expect("at least one layer");
    let logits = logits_rows(g, bound, last, prompt.len() - 1, ids.len())?;
    let targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
    let picks = g.log_softmax_pick(logits, &targets)?;
    Ok(g.sum(picks)?)
}
