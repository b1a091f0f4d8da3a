use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numcore::{Scalar, Tensor};

/// Weights of one transformer block. Linear maps have no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<X> {
    pub ln1_gain: X,
    pub ln1_bias: X,
    pub wq: X,
    pub wk: X,
    pub wv: X,
    pub wo: X,
    pub ln2_gain: X,
    pub ln2_bias: X,
    /// `[d, d_ff]`
    pub w_up: X,
    /// `[d_ff, d]`
    pub w_down: X,
}

/// Full set of named model tensors. `X` is a [`Tensor`] for stored weights
/// and a graph handle while a forward pass is being recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<X> {
    /// `[V, d]`
    pub tok_emb: X,
    /// `[context, d]`
    pub pos_emb: X,
    pub blocks: Vec<Block<X>>,
    pub ln_f_gain: X,
    pub ln_f_bias: X,
    /// `[d, V]`
    pub unembed: X,
}

pub type Params<T> = ParamSet<Tensor<T>>;

/// Projection matrices that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "attn.q",
            Self::K => "attn.k",
            Self::V => "attn.v",
            Self::O => "attn.o",
            Self::Up => "mlp.up",
            Self::Down => "mlp.down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl<X> Block<X> {
    pub fn target(&self, t: LoraTarget) -> &X {
        match t {
            LoraTarget::Q => &self.wq,
            LoraTarget::K => &self.wk,
            LoraTarget::V => &self.wv,
            LoraTarget::O => &self.wo,
            LoraTarget::Up => &self.w_up,
            LoraTarget::Down => &self.w_down,
        }
    }

    pub fn target_mut(&mut self, t: LoraTarget) -> &mut X {
        match t {
            LoraTarget::Q => &mut self.wq,
            LoraTarget::K => &mut self.wk,
            LoraTarget::V => &mut self.wv,
            LoraTarget::O => &mut self.wo,
            LoraTarget::Up => &mut self.w_up,
            LoraTarget::Down => &mut self.w_down,
        }
    }

    fn entries(&self) -> [(&'static str, &X); 10] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.q", &self.wq),
            ("attn.k", &self.wk),
            ("attn.v", &self.wv),
            ("attn.o", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.up", &self.w_up),
            ("mlp.down", &self.w_down),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut X); 10] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.q", &mut self.wq),
            ("attn.k", &mut self.wk),
            ("attn.v", &mut self.wv),
            ("attn.o", &mut self.wo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.up", &mut self.w_up),
            ("mlp.down", &mut self.w_down),
        ]
    }

    fn try_map<Y, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &X) -> Result<Y, E>) -> Result<Block<Y>, E> {
        let mut m = |suffix: &str, x: &X| f(&format!("{prefix}.{suffix}"), x);
        Ok(Block {
            ln1_gain: m("ln1.gain", &self.ln1_gain)?,
            ln1_bias: m("ln1.bias", &self.ln1_bias)?,
            wq: m("attn.q", &self.wq)?,
            wk: m("attn.k", &self.wk)?,
            wv: m("attn.v", &self.wv)?,
            wo: m("attn.o", &self.wo)?,
            ln2_gain: m("ln2.gain", &self.ln2_gain)?,
            ln2_bias: m("ln2.bias", &self.ln2_bias)?,
            w_up: m("mlp.up", &self.w_up)?,
            w_down: m("mlp.down", &self.w_down)?,
        })
    }
}

impl ParamSet<()> {
    /// Placeholder set used to enumerate names for `layers` blocks.
    pub fn skeleton(layers: usize) -> Self {
        let block = Block {
            ln1_gain: (),
            ln1_bias: (),
            wq: (),
            wk: (),
            wv: (),
            wo: (),
            ln2_gain: (),
            ln2_bias: (),
            w_up: (),
            w_down: (),
        };
        ParamSet {
            tok_emb: (),
            pos_emb: (),
            blocks: vec![block; layers],
            ln_f_gain: (),
            ln_f_bias: (),
            unembed: (),
        }
    }
}

impl<X> ParamSet<X> {
    /// Tensors in canonical order with their checkpoint names.
    pub fn entries(&self) -> Vec<(String, &X)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.entries().into_iter().map(|(n, x)| (format!("blocks.{i}.{n}"), x)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut X)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.entries_mut().into_iter().map(|(n, x)| (format!("blocks.{i}.{n}"), x)));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f_bias));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn try_map<Y, E>(&self, mut f: impl FnMut(&str, &X) -> Result<Y, E>) -> Result<ParamSet<Y>, E> {
        let tok_emb = f("tok_emb", &self.tok_emb)?;
        let pos_emb = f("pos_emb", &self.pos_emb)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(ParamSet {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain: f("ln_f.gain", &self.ln_f_gain)?,
            ln_f_bias: f("ln_f.bias", &self.ln_f_bias)?,
            unembed: f("unembed", &self.unembed)?,
        })
    }
}

impl<T: Scalar> Params<T> {
    /// Random initialisation: N(0, 0.02) for matrices, with residual output
    /// projections scaled by `1/sqrt(2L)`; unit gains and zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let resid_std = std / ((2 * cfg.layers) as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
            Tensor::new(shape.to_vec(), data).expect("length matches shape")
        };
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let tok_emb = normal(&[cfg.vocab_size, d], std);
        let pos_emb = normal(&[cfg.context, d], std);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                wq: normal(&[d, d], std),
                wk: normal(&[d, d], std),
                wv: normal(&[d, d], std),
                wo: normal(&[d, d], resid_std),
                ln2_gain: Tensor::full(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: normal(&[d, ff], std),
                w_down: normal(&[ff, d], resid_std),
            })
            .collect();
        let unembed = normal(&[d, cfg.vocab_size], std);
        Ok(ParamSet {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain: Tensor::full(&[d], T::one()),
            ln_f_bias: Tensor::zeros(&[d]),
            unembed,
        })
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::expected_shapes(cfg);
        if self.blocks.len() != cfg.layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                cfg.layers
            )));
        }
        for ((name, t), (_, shape)) in self.entries().into_iter().zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let block = Block {
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            wq: vec![d, d],
            wk: vec![d, d],
            wv: vec![d, d],
            wo: vec![d, d],
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            w_up: vec![d, ff],
            w_down: vec![ff, d],
        };
        let set = ParamSet {
            tok_emb: vec![v, d],
            pos_emb: vec![cfg.context, d],
            blocks: vec![block; cfg.layers],
            ln_f_gain: vec![d],
            ln_f_bias: vec![d],
            unembed: vec![d, v],
        };
        set.entries().into_iter().map(|(n, s)| (n, s.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        self.try_map(|_, t| Ok::<_, ()>(t.cast())).expect("infallible")
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.all_finite())
    }

    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}
