//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use super::ops;
use super::tensor::{Scalar, Tensor};
use super::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Stack(Vec<Var>),
    Index(Var, usize),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceFlat {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Detach,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of primitive ops, differentiable by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, contrib: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, NumError> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumError> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<Var, NumError> {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::sub(self.value(a), self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::mul(self.value(a), self.value(b))?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumError> {
        let v = ops::add_row(self.value(x), self.value(row))?;
        self.push("add_row", v, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumError> {
        let s = T::from_f64(factor);
        let v = self.value(x).map(|e| e * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumError> {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let v = ops::transpose(self.value(x))?;
        self.push("transpose", v, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let v = ops::embedding(self.value(table), ids)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let (v, mean, rstd) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(ops::gelu_scalar);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(ops::sigmoid_scalar);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(ops::log_sigmoid_scalar);
        self.push("log_sigmoid", v, Op::LogSigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(|e| e.ln());
        self.push("log", v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).map(|e| e.exp());
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let v = ops::softmax(self.value(x), axis)?;
        self.push("softmax", v, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let v = ops::log_softmax(self.value(x), axis)?;
        self.push("log_softmax", v, Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let v = ops::logsumexp(self.value(x), axis)?;
        self.push("logsumexp", v, Op::LogSumExp { x, axis }, &[x])
    }

    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumError> {
        let v = ops::log_softmax_pick(self.value(logits), targets)?;
        self.push(
            "log_softmax_pick",
            v,
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumError::Empty { op: "mean" });
        }
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(t.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var, NumError> {
        let mut data = Vec::with_capacity(items.len());
        for &it in items {
            data.push(self.value(it).item()?);
        }
        let v = Tensor::new(vec![items.len()], data)?;
        self.push("stack", v, Op::Stack(items.to_vec()), items)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var, NumError> {
        let t = self.value(x);
        let e = *t.data().get(i).ok_or(NumError::Index {
            index: i,
            bound: t.len(),
        })?;
        self.push("index", Tensor::scalar(e), Op::Index(x, i), &[x])
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if start > end || end > n {
            return Err(NumError::Index { index: end, bound: n });
        }
        let v = Tensor::new(vec![end - start, d], t.data()[start * d..end * d].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows { x, start }, &[x])
    }

    /// Flat elements `start..end`, reshaped to `shape`.
    pub fn slice_flat(&mut self, x: Var, start: usize, end: usize, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x);
        if start > end || end > t.len() {
            return Err(NumError::Index {
                index: end,
                bound: t.len(),
            });
        }
        let v = Tensor::new(shape.to_vec(), t.data()[start..end].to_vec())?;
        self.push("slice_flat", v, Op::SliceFlat { x, start }, &[x])
    }

    /// Fused multi-head causal self-attention.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumError> {
        let (out, probs) = ops::causal_attention(self.value(q), self.value(k), self.value(v), heads)?;
        self.push(
            "causal_attention",
            out,
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Attention probabilities `[heads, n, n]` saved by an attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Elementwise product with a fixed, pre-scaled keep mask.
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NumError> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(NumError::ShapeMismatch {
                op: "dropout",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { x, mask }, &[x])
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x).clone();
        self.nodes.push(Node {
            value: v,
            op: Op::Detach,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the scalar `loss` with respect to all leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumError> {
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*row) {
                    let d = self.value(*row).len();
                    let mut gr = vec![T::zero(); d];
                    for chunk in g.chunks(d) {
                        for (a, &b) in gr.iter_mut().zip(chunk) {
                            *a = *a + b;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&e| e * *s).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = at.dims2()?;
                let (_, n) = bt.dims2()?;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    ops::gemm(m, n, k, g, false, bt.data(), true, &mut ga, T::one(), T::zero());
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    ops::gemm(k, m, n, at.data(), true, g, false, &mut gb, T::one(), T::zero());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    // g is [c, r]
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] = g[i * r + j];
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let t = self.value(*table);
                    let (_, d) = t.dims2()?;
                    let mut gt = vec![T::zero(); t.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[row * d + j];
                        }
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = mean.len();
                let df = T::from_f64(d as f64);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut gx = vec![T::zero(); xv.len()];
                let mut xhat = vec![T::zero(); d];
                let mut gxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..d {
                        let gy = g[r * d + j];
                        xhat[j] = (xv[r * d + j] - mu) * rs;
                        gg[j] = gg[j] + gy * xhat[j];
                        gb[j] = gb[j] + gy;
                        gxhat[j] = gy * gv[j];
                        sum_g = sum_g + gxhat[j];
                        sum_gx = sum_gx + gxhat[j] * xhat[j];
                    }
                    let mg = sum_g / df;
                    let mgx = sum_gx / df;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gxhat[j] - mg - xhat[j] * mgx);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        grads,
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| gi * ops::gelu_grad_scalar(xi))
                            .collect(),
                    );
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        grads,
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(
                        grads,
                        *x,
                        g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
                    );
                }
            }
            Op::LogSigmoid(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        grads,
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| gi * ops::sigmoid_scalar(-xi))
                            .collect(),
                    );
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(grads, *x, g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect());
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(grads, *x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis)?;
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot =
                                (0..len).fold(T::zero(), |acc, j| acc + g[base + j * inner] * y[base + j * inner]);
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis)?;
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let gsum = (0..len).fold(T::zero(), |acc, j| acc + g[base + j * inner]);
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = g[p] - y[p].exp() * gsum;
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::LogSumExp { x, axis } => {
                if self.wants(*x) {
                    let xt = self.value(*x);
                    let sm = ops::softmax(xt, *axis)?;
                    let (outer, len, inner) = ops::axis_split(xt.shape(), *axis)?;
                    let s = sm.data();
                    let mut gx = vec![T::zero(); s.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let go = g[o * inner + i];
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = go * s[p];
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::LogSoftmaxPick { logits, targets } => {
                if self.wants(*logits) {
                    let lt = self.value(*logits);
                    let (_, v) = lt.dims2()?;
                    let sm = ops::softmax(lt, 1)?;
                    let mut gx = sm.into_vec();
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = g[i];
                        for e in &mut gx[i * v..(i + 1) * v] {
                            *e = -*e * gi;
                        }
                        gx[i * v + t] = gx[i * v + t] + gi;
                    }
                    accumulate(grads, *logits, gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
                }
            }
            Op::Stack(items) => {
                for (i, &it) in items.iter().enumerate() {
                    if self.wants(it) {
                        accumulate(grads, it, vec![g[i]]);
                    }
                }
            }
            Op::Index(x, i) => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    gx[*i] = g[0];
                    accumulate(grads, *x, gx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let xt = self.value(*x);
                    let (_, d) = xt.dims2()?;
                    let mut gx = vec![T::zero(); xt.len()];
                    gx[start * d..start * d + g.len()].copy_from_slice(g);
                    accumulate(grads, *x, gx);
                }
            }
            Op::SliceFlat { x, start } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    gx[*start..*start + g.len()].copy_from_slice(g);
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, g)?;
                if self.wants(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    g: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>), NumError> {
    let (n, d) = q.dims2()?;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut gq = vec![T::zero(); n * d];
    let mut gk = vec![T::zero(); n * d];
    let mut gv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        // SAFETY: all pointers address [n, d] buffers with row stride d and
        // column offsets < d; p and dp are [n, n].
        unsafe {
            // dP = dO_h · V_hᵀ
            T::gemm(
                n,
                dh,
                n,
                T::one(),
                g.as_ptr().add(off),
                d as isize,
                1,
                v.data().as_ptr().add(off),
                1,
                d as isize,
                T::zero(),
                dp.as_mut_ptr(),
                n as isize,
                1,
            );
            // dV_h = Pᵀ · dO_h
            T::gemm(
                n,
                n,
                dh,
                T::one(),
                p.as_ptr(),
                1,
                n as isize,
                g.as_ptr().add(off),
                d as isize,
                1,
                T::zero(),
                gv.as_mut_ptr().add(off),
                d as isize,
                1,
            );
        }
        // dS = P ⊙ (dP - rowsum(dP ⊙ P))
        for i in 0..n {
            let row = i * n;
            let dot = (0..=i).fold(T::zero(), |acc, j| acc + dp[row + j] * p[row + j]);
            for j in 0..=i {
                dp[row + j] = p[row + j] * (dp[row + j] - dot);
            }
            for j in i + 1..n {
                dp[row + j] = T::zero();
            }
        }
        unsafe {
            // dQ_h = dS · K_h · scale
            T::gemm(
                n,
                n,
                dh,
                scale,
                dp.as_ptr(),
                n as isize,
                1,
                k.data().as_ptr().add(off),
                d as isize,
                1,
                T::zero(),
                gq.as_mut_ptr().add(off),
                d as isize,
                1,
            );
            // dK_h = dSᵀ · Q_h · scale
            T::gemm(
                n,
                n,
                dh,
                scale,
                dp.as_ptr(),
                1,
                n as isize,
                q.data().as_ptr().add(off),
                d as isize,
                1,
                T::zero(),
                gk.as_mut_ptr().add(off),
                d as isize,
                1,
            );
        }
    }
    Ok((gq, gk, gv))
}
