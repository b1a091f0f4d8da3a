use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{LoraTarget, Params};
use super::{ModelConfig, ModelError};
use crate::numcore::{ops, Scalar, Tensor};
use crate::util::mix64;

/// Adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
    /// Dropout probability on the adapter input, training mode only.
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::InvalidConfig("lora rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "lora dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(ModelError::InvalidConfig("lora alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Factors of one adapted matrix: `delta = scaling * a · b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<X> {
    /// `[d_in, r]`
    pub a: X,
    /// `[r, d_out]`
    pub b: X,
}

/// Low-rank adapters for every projection of every block, indexed by
/// [`LoraTarget::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<X> {
    pub blocks: Vec<[LoraPair<X>; 6]>,
}

impl<X> LoraFactors<X> {
    pub fn get(&self, layer: usize, t: LoraTarget) -> &LoraPair<X> {
        &self.blocks[layer][t.index()]
    }

    pub fn entries(&self) -> Vec<(String, &X)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for t in LoraTarget::ALL {
                let p = &block[t.index()];
                out.push((format!("lora.blocks.{i}.{}.a", t.name()), &p.a));
                out.push((format!("lora.blocks.{i}.{}.b", t.name()), &p.b));
            }
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut X)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (t, p) in LoraTarget::ALL.into_iter().zip(block.iter_mut()) {
                out.push((format!("lora.blocks.{i}.{}.a", t.name()), &mut p.a));
                out.push((format!("lora.blocks.{i}.{}.b", t.name()), &mut p.b));
            }
        }
        out
    }

    pub fn try_map<Y, E>(&self, mut f: impl FnMut(&str, &X) -> Result<Y, E>) -> Result<LoraFactors<Y>, E> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let mut pairs = Vec::with_capacity(6);
            for t in LoraTarget::ALL {
                let p = &block[t.index()];
                let base = format!("lora.blocks.{i}.{}", t.name());
                pairs.push(LoraPair {
                    a: f(&format!("{base}.a"), &p.a)?,
                    b: f(&format!("{base}.b"), &p.b)?,
                });
            }
            let arr: [LoraPair<Y>; 6] = match pairs.try_into() {
                Ok(a) => a,
                Err(_) => unreachable!("six targets"),
            };
            blocks.push(arr);
        }
        Ok(LoraFactors { blocks })
    }
}

/// A trained or freshly initialised adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub factors: LoraFactors<Tensor<T>>,
}

fn target_dims(cfg: &ModelConfig, t: LoraTarget) -> (usize, usize) {
    match t {
        LoraTarget::Up => (cfg.d_model, cfg.d_ff),
        LoraTarget::Down => (cfg.d_ff, cfg.d_model),
        _ => (cfg.d_model, cfg.d_model),
    }
}

impl<T: Scalar> LoraAdapter<T> {
    /// `a ~ N(0, 1/r)`, `b = 0`, so the adapted model starts equal to the base.
    pub fn init(model: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<Self, ModelError> {
        lora.validate()?;
        let r = lora.rank;
        let dist = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
        let mut blocks = Vec::with_capacity(model.layers);
        for layer in 0..model.layers {
            let pairs = LoraTarget::ALL.map(|t| {
                let (din, dout) = target_dims(model, t);
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[seed, layer as u64, t.index() as u64]));
                let a: Vec<T> = (0..din * r).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
                LoraPair {
                    a: Tensor::new(vec![din, r], a).expect("length matches shape"),
                    b: Tensor::zeros(&[r, dout]),
                }
            });
            blocks.push(pairs);
        }
        Ok(Self {
            rank: r,
            alpha: lora.alpha,
            dropout: lora.dropout,
            factors: LoraFactors { blocks },
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn config(&self) -> LoraConfig {
        LoraConfig {
            enabled: true,
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.factors.blocks.len() != cfg.layers {
            return Err(ModelError::InvalidConfig(format!(
                "adapter has {} blocks for {} layers",
                self.factors.blocks.len(),
                cfg.layers
            )));
        }
        for (i, block) in self.factors.blocks.iter().enumerate() {
            for t in LoraTarget::ALL {
                let (din, dout) = target_dims(cfg, t);
                let p = &block[t.index()];
                for (suffix, tensor, shape) in [("a", &p.a, [din, self.rank]), ("b", &p.b, [self.rank, dout])] {
                    if tensor.shape() != shape {
                        return Err(ModelError::ShapeMismatch {
                            name: format!("lora.blocks.{i}.{}.{suffix}", t.name()),
                            expected: shape.to_vec(),
                            actual: tensor.shape().to_vec(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            factors: self.factors.try_map(|_, t| Ok::<_, ()>(t.cast())).expect("infallible"),
        }
    }

    /// `scaling * a · b` for one target.
    pub fn delta(&self, layer: usize, t: LoraTarget) -> Result<Tensor<T>, ModelError> {
        let p = self.factors.get(layer, t);
        let ab = ops::matmul(&p.a, &p.b)?;
        let s = T::from_f64(self.scaling());
        Ok(ab.map(|x| x * s))
    }
}

/// Bakes the adapter into a copy of the base weights.
pub fn merge_lora<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    adapter: &LoraAdapter<T>,
) -> Result<Params<T>, ModelError> {
    adapter.check_shapes(cfg)?;
    let mut merged = params.clone();
    for (layer, block) in merged.blocks.iter_mut().enumerate() {
        for t in LoraTarget::ALL {
            let delta = adapter.delta(layer, t)?;
            let w = block.target_mut(t);
            *w = ops::add(w, &delta)?;
        }
    }
    Ok(merged)
}
