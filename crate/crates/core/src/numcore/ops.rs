//! Untaped forward primitives.
//!
//! The graph in [`super::graph`] wraps these for reverse-mode differentiation;
//! inference paths call them directly.

use super::tensor::{Scalar, Tensor};
use super::NumError;

const LN_EPS: f64 = 1e-5;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Raw row-major gemm over slices: `c = alpha * op(a)·op(b) + beta * c`.
///
/// `a` is `[m, k]` (or `[k, m]` when `trans_a`), `b` is `[k, n]` (or `[n, k]`
/// when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    alpha: T,
    beta: T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the strides above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, T::one(), T::zero());
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `x[n, d] + row[d]`, broadcasting over the leading dimension only.
pub fn add_row<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (n, d) = x.dims2()?;
    if row.shape() != [d] {
        return Err(NumError::ShapeMismatch {
            op: "add_row",
            left: x.shape().to_vec(),
            right: row.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    let r = row.data();
    for i in 0..n {
        for (o, &b) in out[i * d..(i + 1) * d].iter_mut().zip(r) {
            *o = *o + b;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), NumError> {
    if axis >= shape.len() {
        return Err(NumError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtraction, f64 accumulation).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner].as_f64());
            }
            let mut sum = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[base + j * inner].as_f64() - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = T::from_f64(b / sum);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `log(sum(exp(x)))` along `axis`; the axis is removed from the shape.
pub fn logsumexp<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(NumError::Empty { op: "logsumexp" });
    }
    let src = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner].as_f64());
            }
            let sum: f64 = (0..len).map(|j| (src[base + j * inner].as_f64() - max).exp()).sum();
            out.push(T::from_f64(max + sum.ln()));
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let lse = logsumexp(x, axis)?;
    let src = x.data();
    let l = lse.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let z = l[o * inner + i];
            for j in 0..len {
                out[base + j * inner] = src[base + j * inner] - z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row `log_softmax(logits)[row, target[row]]` for `logits[n, V]`.
pub fn log_softmax_pick<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>, NumError> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(NumError::ShapeMismatch {
            op: "log_softmax_pick",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let lse = logsumexp(logits, 1)?;
    let mut out = Vec::with_capacity(n);
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(NumError::Index { index: t, bound: v });
        }
        out.push(logits.data()[i * v + t] - lse.data()[i]);
    }
    Tensor::new(vec![n], out)
}

/// Output, per-row mean and per-row reciprocal standard deviation.
pub type LayerNormParts<T> = (Tensor<T>, Vec<T>, Vec<T>);

/// Layer normalisation over the last axis. Returns the output together with
/// the per-row mean and reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<LayerNormParts<T>, NumError> {
    let d = *x.shape().last().ok_or(NumError::Empty { op: "layer_norm" })?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(NumError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let rows = x.len() / d.max(1);
    let src = x.data();
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![T::zero(); src.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let df = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &src[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / df;
        let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / df;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, means, rstds))
}

/// Gathers rows of `table[V, d]`.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>, NumError> {
    let (v, d) = table.dims2()?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(NumError::Index { index: id, bound: v });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], out)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = -softplus(-x)`, stable at large |x|.
pub fn log_sigmoid_scalar<T: Scalar>(x: T) -> T {
    let z = -x;
    let softplus = if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    -softplus
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Multi-head causal self-attention over `q, k, v` of shape `[n, d]`.
///
/// Returns the concatenated head outputs `[n, d]` and the attention
/// probabilities laid out as `[heads, n, n]` (zeros above the diagonal).
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>), NumError> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(NumError::ShapeMismatch {
            op: "causal_attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(NumError::InvalidArgument(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * n * n];
    let mut out = vec![T::zero(); n * d];
    let mut scores = vec![T::zero(); n * n];
    let mut exps = vec![0.0f64; n];
    for h in 0..heads {
        let off = h * dh;
        // scores = q_h · k_hᵀ
        unsafe {
            T::gemm(
                n,
                dh,
                n,
                scale,
                q.data().as_ptr().add(off),
                d as isize,
                1,
                k.data().as_ptr().add(off),
                1,
                d as isize,
                T::zero(),
                scores.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let row = &scores[i * n..i * n + i + 1];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let mut sum = 0.0;
            for (j, e) in exps[..=i].iter_mut().enumerate() {
                *e = (row[j].as_f64() - max).exp();
                sum += *e;
            }
            for j in 0..=i {
                p[i * n + j] = T::from_f64(exps[j] / sum);
            }
        }
        // out_h = p · v_h
        unsafe {
            T::gemm(
                n,
                n,
                dh,
                T::one(),
                p.as_ptr(),
                n as isize,
                1,
                v.data().as_ptr().add(off),
                d as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(off),
                d as isize,
                1,
            );
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, probs))
}
