//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and enough cached
//! state to run its backward rule. Nodes are appended in evaluation order, so
//! walking the node list backwards is a valid reverse topological order.

use std::collections::BTreeMap;

use super::tensor::matmul_raw;
use super::{NumericsError, Tensor, LOG_CLAMP};

/// Identifier of a trainable parameter, assigned by the owner of the
/// parameter storage.
pub type ParamId = usize;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization with fixed (running) statistics.
    BatchNormFixed {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-column statistics of a batch-norm input in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-B) variance.
    pub var: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every parameter leaf recorded
/// on the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over the selected parameters (all when `ids` is `None`).
    pub fn norm(&self, ids: Option<&[ParamId]>) -> f64 {
        let sq: f64 = match ids {
            Some(ids) => ids
                .iter()
                .filter_map(|id| self.grads.get(id))
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum(),
            None => self
                .grads
                .values()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum(),
        };
        sq.sqrt()
    }

    /// Elementwise `self += other`; ids missing on one side are copied.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NumericsError> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(NumericsError::ShapeMismatch {
                            op: "accumulate",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn row_operand(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if b.ndim() == 1 && b.numel() == a.cols() && a.ndim() >= 1 {
        Ok(())
    } else {
        Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    if t.ndim() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(NumericsError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        check_finite(name, &value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a trainable leaf. Its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose()?;
        self.push_checked("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a (… × n) + b (n)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        row_operand("add_row", ta, tb)?;
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("add_row", out, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `a (… × n) ⊙ b (n)`, broadcasting `b` over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        row_operand("mul_row", ta, tb)?;
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("mul_row", out, Op::MulRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * factor);
        self.push_checked("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_checked("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::exp);
        self.push_checked("exp", out, Op::Exp(a), &[a])
    }

    /// Natural log with the input clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        self.push_checked("log", out, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_checked("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push_checked("mean", out, Op::Mean(a), &[a])
    }

    /// Sum over the last axis.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
        let data = t.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, data)?;
        self.push_checked("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.ndim() != 2 {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push_checked("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Row-wise unit-norm scaling. Rows with norm at or below 1e-12 are an
    /// error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.clone();
        for (i, row) in t.iter_rows().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= super::NORM_FLOOR {
                return Err(NumericsError::ZeroNorm { row: i });
            }
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        self.push_checked("l2_normalize", out, Op::L2Normalize { x: a, norms }, &[a])
    }

    /// Layer normalization over the last axis with a learnable affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        row_operand("layer_norm", tx, self.value(gamma))?;
        row_operand("layer_norm", tx, self.value(beta))?;
        let n = tx.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.iter_rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with statistics of the current batch (columns
    /// normalized across rows). Returns the batch statistics for running-stat
    /// bookkeeping.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), NumericsError> {
        let tx = self.value(x);
        let (rows, cols) = rank2("batch_norm", tx)?;
        row_operand("batch_norm", tx, self.value(gamma))?;
        row_operand("batch_norm", tx, self.value(beta))?;
        if rows == 0 {
            return Err(NumericsError::Empty { op: "batch_norm" });
        }
        let d = tx.data();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += d[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let dv = d[r * cols + c] - mean[c];
                var[c] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (d[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let v = self.push_checked(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch normalization with externally supplied statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, cols) = rank2("batch_norm_eval", tx)?;
        row_operand("batch_norm_eval", tx, self.value(gamma))?;
        row_operand("batch_norm_eval", tx, self.value(beta))?;
        if mean.len() != cols || var.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: tx.shape().to_vec(),
                rhs: vec![mean.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = tx.data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (d[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push_checked(
            "batch_norm_eval",
            out,
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = super::functional::softmax_rows(self.value(a));
        self.push_checked("softmax", out, Op::Softmax(a), &[a])
    }

    /// Nonnegative row entropy `-Σ_k p_k ln p_k` of a probability matrix.
    pub fn entropy_rows(&mut self, probs: Var) -> Result<Var, NumericsError> {
        let logp = self.log(probs)?;
        let plogp = self.mul(probs, logp)?;
        let s = self.sum_rows(plogp)?;
        self.scale(s, -1.0)
    }

    /// `Σ_i w_i v_i` for a constant weight vector.
    pub fn weighted_sum(&mut self, v: Var, weights: &[f64]) -> Result<Var, NumericsError> {
        let shape = self.value(v).shape().to_vec();
        let w = self.constant(Tensor::new(shape, weights.to_vec())?);
        let prod = self.mul(v, w)?;
        self.sum(prod)
    }

    /// Mean cross-entropy `-(1/B) Σ_i Σ_k y_ik ln p_ik` against a constant
    /// label matrix.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var, NumericsError> {
        let rows = self.value(probs).rows();
        let y = self.constant(targets.clone());
        let logp = self.log(probs)?;
        let ylogp = self.mul(y, logp)?;
        let s = self.sum(ylogp)?;
        self.scale(s, -1.0 / rows as f64)
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    /// Parameters that do not influence the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            // Param leaves keep their gradient for collection below.
            if let Op::Param(_) = node.op {
                grads[idx] = Some(dy);
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads
                    .get(idx)
                    .and_then(|g| g.as_ref())
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()))
                    .transpose()?
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.grads.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let bt = tb.transpose().expect("rank checked in forward");
                    let da = matmul_raw(dy, bt.data(), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let at = ta.transpose().expect("rank checked in forward");
                    let db = matmul_raw(at.data(), dy, k, m, n);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let t = Tensor::new(node.value.shape().to_vec(), dy.to_vec())
                    .and_then(|t| t.transpose())
                    .expect("shape recorded in forward");
                accumulate(&mut grads[a.0], t.data());
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy);
                }
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % c] += g;
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da: Vec<f64> = dy.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = tb.numel();
                if self.wants(*a) {
                    let da: Vec<f64> = dy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * tb.data()[i % c])
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; c];
                    for (i, (g, x)) in dy.iter().zip(ta.data()).enumerate() {
                        db[i % c] += g * x;
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = dy.iter().map(|g| g * f).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > LOG_CLAMP { g / x } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![dy[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let da: Vec<f64> = (0..t.numel()).map(|i| dy[i / c]).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &dy[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let c = g.len();
                let rows = inv_std.len();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (i, d) in dy.iter().enumerate() {
                        dg[i % c] += d * xhat[i];
                        db[i % c] += d;
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], &dg);
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], &db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let nf = c as f64;
                    for r in 0..rows {
                        let base = r * c;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = dy[base + j] * g[j];
                            s1 += dh;
                            s2 += dh * xhat[base + j];
                        }
                        for j in 0..c {
                            let dh = dy[base + j] * g[j];
                            dx[base + j] = inv_std[r] / nf * (nf * dh - s1 - xhat[base + j] * s2);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let c = g.len();
                let rows = dy.len() / c;
                self.affine_param_grads(*gamma, *beta, dy, xhat, c, grads);
                if self.wants(*x) {
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            let dh = dy[i] * g[j];
                            s1[j] += dh;
                            s2[j] += dh * xhat[i];
                        }
                    }
                    let bf = rows as f64;
                    let mut dx = vec![0.0; dy.len()];
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            let dh = dy[i] * g[j];
                            dx[i] = inv_std[j] / bf * (bf * dh - s1[j] - xhat[i] * s2[j]);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let c = g.len();
                self.affine_param_grads(*gamma, *beta, dy, xhat, c, grads);
                if self.wants(*x) {
                    let dx: Vec<f64> = dy
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * g[i % c] * inv_std[i % c])
                        .collect();
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &dy[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], &dx);
            }
        }
    }

    fn affine_param_grads(
        &self,
        gamma: Var,
        beta: Var,
        dy: &[f64],
        xhat: &[f64],
        c: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if self.wants(gamma) {
            let mut dg = vec![0.0; c];
            for (i, d) in dy.iter().enumerate() {
                dg[i % c] += d * xhat[i];
            }
            accumulate(&mut grads[gamma.0], &dg);
        }
        if self.wants(beta) {
            let mut db = vec![0.0; c];
            for (i, d) in dy.iter().enumerate() {
                db[i % c] += d;
            }
            accumulate(&mut grads[beta.0], &db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut g = Graph::new();
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let w = g.param(0, Tensor::vector(vec![0.3, 0.1, -0.7]));
        let xv = g.constant(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), x.data());
    }

    #[test]
    fn uniform_logits_are_entropy_stationary() {
        let mut g = Graph::new();
        let z = g.param(0, Tensor::matrix(1, 4, vec![0.7; 4]).unwrap());
        let p = g.softmax(z).unwrap();
        let e = g.entropy_rows(p).unwrap();
        let loss = g.sum(e).unwrap();
        assert!(close(g.value(loss).item(), 4f64.ln(), 1e-12));
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::vector(vec![1.0, 2.0]));
        let _b = g.param(1, Tensor::vector(vec![3.0, 4.0, 5.0]));
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1).unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(grads.get(0).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(a),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shared_node_gradients_sum() {
        // loss = sum(w ⊙ w)  ⇒  grad = 2w
        let mut g = Graph::new();
        let w = g.param(0, Tensor::vector(vec![1.5, -0.5]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(a).unwrap();
        let d = g.value(y).data();
        assert!(close(d[0], 0.6, 1e-15) && close(d[1], 0.8, 1e-15));
    }

    #[test]
    fn zero_row_normalize_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.l2_normalize(a),
            Err(NumericsError::ZeroNorm { row: 0 })
        ));
    }

    #[test]
    fn batch_norm_standardizes() {
        // values with mean 2 and variance 4: {0, 4} repeated
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 1, vec![0.0, 4.0, 0.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::vector(vec![1.0]));
        let beta = g.constant(Tensor::vector(vec![0.0]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![4.0]);
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(close(mean, 0.0, 1e-12) && close(var, 1.0, 1e-12));
    }

    #[test]
    fn exp_overflow_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(g.exp(a), Err(NumericsError::NonFinite { op: "exp" })));
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.param(1, Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let loss = g.weighted_sum(c, &w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(1).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
