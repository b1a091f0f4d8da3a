//! Binary checkpoint format.
//!
//! ```text
//! "TBLM" | version u32 | vocab layers heads d_model d_ff context (u32 each)
//!        | seed u64 | lora_rank u32 | lora_alpha f64 | lora_dropout f64
//!        | records until EOF: name_len u32, name, ndims u32, dims u32..., f32 data
//! ```
//! All integers and floats are little-endian. `lora_rank == 0` means no adapter.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::lora::{LoraAdapter, LoraConfig, LoraFactors, LoraPair};
use super::params::{LoraTarget, ParamSet};
use super::{Model, ModelConfig, ModelError};
use crate::numcore::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TBLM";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<(), ModelError> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &x in t.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>, ModelError> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.layers, c.heads, c.d_model, c.d_ff, c.context] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    let (rank, alpha, dropout) = model
        .lora
        .as_ref()
        .map_or((0, 0.0, 0.0), |l| (l.rank, l.alpha, l.dropout));
    put_u32(&mut out, rank)?;
    out.extend_from_slice(&alpha.to_le_bytes());
    out.extend_from_slice(&dropout.to_le_bytes());
    for (name, t) in model.params.entries() {
        put_tensor(&mut out, &name, t)?;
    }
    if let Some(l) = &model.lora {
        for (name, t) in l.factors.entries() {
            put_tensor(&mut out, &name, t)?;
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model<f32>, ModelError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: c.u32()?,
        layers: c.u32()?,
        heads: c.u32()?,
        d_model: c.u32()?,
        d_ff: c.u32()?,
        context: c.u32()?,
        seed: c.u64()?,
    };
    config.validate()?;
    let rank = c.u32()?;
    let alpha = c.f64()?;
    let dropout = c.f64()?;
    let mut tensors = BTreeMap::new();
    while !c.done() {
        let name_len = c.u32()?;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndims = c.u32()?;
        let shape = (0..ndims).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>, _>>()?;
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
    };
    let params = ParamSet::skeleton(config.layers).try_map(|name, _| take(name))?;
    let lora = if rank > 0 {
        let lc = LoraConfig {
            enabled: true,
            rank,
            alpha,
            dropout,
        };
        lc.validate()?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut pairs = Vec::with_capacity(6);
            for t in LoraTarget::ALL {
                let base = format!("lora.blocks.{i}.{}", t.name());
                pairs.push(LoraPair {
                    a: take(&format!("{base}.a"))?,
                    b: take(&format!("{base}.b"))?,
                });
            }
            blocks.push(match pairs.try_into() {
                Ok(a) => a,
                Err(_) => unreachable!("six targets"),
            });
        }
        Some(LoraAdapter {
            rank,
            alpha: lc.alpha,
            dropout: lc.dropout,
            factors: LoraFactors { blocks },
        })
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Model::new(config, params, lora)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), ModelError> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>, ModelError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
