//! Reverse-mode tape.
//!
//! Nodes are appended in construction order (already topological); values are
//! computed eagerly so attention weights can be read right after the forward
//! pass. Every op output is checked for finiteness: a NaN or infinity is an
//! error, not something to propagate.

use super::tensor::Tensor;
use crate::util::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Positional-information add; same arithmetic as `Add`, kept distinct so
    /// both registered primitives exist and are checked.
    EmbeddingAdd(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        p: f64,
        active: bool,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    WeightedCrossEntropy {
        logits: NodeId,
        label: usize,
        weight: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {message}")]
    Parameter { op: &'static str, message: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub struct Graph {
    nodes: Vec<Node>,
    /// Training mode enables dropout.
    pub train: bool,
    /// Seed for counter-based dropout masks; combine the step index into this
    /// seed when building per-step graphs.
    pub dropout_seed: u64,
}

impl Graph {
    pub fn new(train: bool, dropout_seed: u64) -> Graph {
        Graph {
            nodes: Vec::new(),
            train,
            dropout_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Registers a constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, true)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, op_name: &'static str) -> Result<NodeId, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = self.op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn op_parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::EmbeddingAdd(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sum(a) | Op::Transpose(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::Mean { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::WeightedCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    // ---------------------------------------------------------------------
    // Forward builders
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (am, ak) = self.value(a).rows_cols();
        let (bk, bn) = self.value(b).rows_cols();
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 || ak != bk {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), am, ak, bn);
        self.push(Op::MatMul(a, b), Tensor::matrix(am, bn, out), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise_pair(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    /// Adds positional encodings to token embeddings (same-shape add).
    pub fn embedding_add(&mut self, x: NodeId, pe: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise_pair(x, pe, Op::EmbeddingAdd(x, pe), "embedding_add", |a, b| a + b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise_pair(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::Shape {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, Tensor::new(shape, data), name)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| v * c).collect(),
        );
        self.push(Op::Scale(a, c), value, "scale")
    }

    /// Row-wise layer normalization over the last axis with affine output.
    /// A constant row normalizes to zeros via the epsilon in the denominator.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.value(x).data()[r * cols..(r + 1) * cols];
            let (mean, rstd) = row_mean_rstd(row, eps);
            for c in 0..cols {
                let xhat = (row[c] - mean) * rstd;
                out[r * cols + c] =
                    xhat * self.value(gamma).data()[c] + self.value(beta).data()[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::new(shape, out),
            "layer_norm",
        )
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows for rank 2;
    /// rank 1 uses axis 0 over the vector).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        let value = self.value(x);
        let lanes = lanes_for(value, axis).ok_or(AutodiffError::Parameter {
            op: "softmax",
            message: format!("axis {axis} invalid for shape {:?}", value.shape()),
        })?;
        let mut out = vec![0.0; value.len()];
        for lane in lanes {
            softmax_lane(value.data(), &lane, &mut out);
        }
        let shape = value.shape().to_vec();
        self.push(Op::Softmax { x, axis }, Tensor::new(shape, out), "softmax")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| gelu_fwd(*v)).collect(),
        );
        self.push(Op::Gelu(x), value, "gelu")
    }

    /// Inverted dropout: in training, kept activations scale by 1/(1-p);
    /// outside training it is the identity. The mask is a pure function of
    /// (dropout_seed, node id, element), so rebuilding the same graph
    /// reproduces it and parallel execution cannot change it.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Parameter {
                op: "dropout",
                message: format!("p = {p} outside [0, 1)"),
            });
        }
        let active = self.train && p > 0.0;
        let node_id = self.nodes.len();
        let value = if active {
            let scale = 1.0 / (1.0 - p);
            Tensor::new(
                self.value(x).shape().to_vec(),
                self.value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        if dropout_keep(self.dropout_seed, node_id, i, p) {
                            v * scale
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        } else {
            self.value(x).clone()
        };
        self.push(Op::Dropout { x, p, active }, value, "dropout")
    }

    /// Affine map `x @ w + b` applied per row; `x` may be rank 1 or 2.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, in_dim) = self.value(x).rows_cols();
        let (w_in, out_dim) = self.value(w).rows_cols();
        if self.value(w).rank() != 2 || w_in != in_dim || self.value(b).len() != out_dim {
            return Err(AutodiffError::Shape {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), rows, in_dim, out_dim);
        for r in 0..rows {
            for c in 0..out_dim {
                out[r * out_dim + c] += self.value(b).data()[c];
            }
        }
        let value = if self.value(x).rank() == 1 {
            Tensor::vector(out)
        } else {
            Tensor::matrix(rows, out_dim, out)
        };
        self.push(Op::Linear { x, w, b }, value, "linear")
    }

    /// Mean over one axis, squeezing it. Rank-1 input with axis 0 gives a
    /// scalar; rank-2 gives the other axis as a vector.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        let value = self.value(x);
        match (value.rank(), axis) {
            (1, 0) => {
                let n = value.len() as f64;
                let m = value.data().iter().sum::<f64>() / n;
                self.push(Op::Mean { x, axis }, Tensor::scalar(m), "mean")
            }
            (2, 0) => {
                let (rows, cols) = value.rows_cols();
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c] += value.data()[r * cols + c];
                    }
                }
                for v in &mut out {
                    *v /= rows as f64;
                }
                self.push(Op::Mean { x, axis }, Tensor::vector(out), "mean")
            }
            (2, 1) => {
                let (rows, cols) = value.rows_cols();
                let mut out = vec![0.0; rows];
                for r in 0..rows {
                    out[r] = value.row(r).iter().sum::<f64>() / cols as f64;
                }
                self.push(Op::Mean { x, axis }, Tensor::vector(out), "mean")
            }
            _ => Err(AutodiffError::Parameter {
                op: "mean",
                message: format!("axis {axis} invalid for shape {:?}", value.shape()),
            }),
        }
    }

    /// Full sum to a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(x);
        if value.rank() != 2 {
            return Err(AutodiffError::Shape {
                op: "transpose",
                lhs: value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = value.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = value.data()[r * cols + c];
            }
        }
        self.push(Op::Transpose(x), Tensor::matrix(cols, rows, out), "transpose")
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).rows_cols().1;
        let mut rows = 0usize;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows_cols().1 != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows_cols().0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::matrix(rows, cols, data),
            "concat_rows",
        )
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows_cols().0;
        let mut cols = 0usize;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows_cols().0 != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            cols += v.rows_cols().1;
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0usize;
        for &p in parts {
            let v = self.value(p);
            let (_, pc) = v.rows_cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&v.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix(rows, cols, data),
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(x).rank() != 2 || start + len > rows || len == 0 {
            return Err(AutodiffError::Shape {
                op: "slice_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            Op::SliceRows { x, start, len },
            Tensor::matrix(len, cols, data),
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(x).rank() != 2 || start + len > cols || len == 0 {
            return Err(AutodiffError::Shape {
                op: "slice_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).data()[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Op::SliceCols { x, start, len },
            Tensor::matrix(rows, len, data),
            "slice_cols",
        )
    }

    /// Single-sample weighted cross-entropy: `-w * log softmax(logits)[label]`.
    /// Batch reduction (sum of losses over sum of weights) composes from
    /// `add` and `scale`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        label: usize,
        weight: f64,
    ) -> Result<NodeId, AutodiffError> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(AutodiffError::Shape {
                op: "weighted_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        if label >= v.len() {
            return Err(AutodiffError::Contract(format!(
                "label {label} out of range for {} logits",
                v.len()
            )));
        }
        if !(weight > 0.0) {
            return Err(AutodiffError::Parameter {
                op: "weighted_cross_entropy",
                message: format!("weight {weight} must be positive"),
            });
        }
        let log_z = log_sum_exp(v.data());
        let loss = -weight * (v.data()[label] - log_z);
        self.push(
            Op::WeightedCrossEntropy { logits, label, weight },
            Tensor::scalar(loss),
            "weighted_cross_entropy",
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse-topological gradient accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta_shape: &[usize], delta: Vec<f64>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(&delta) {
                    *gv += dv;
                }
            }
            None => node.grad = Some(Tensor::new(delta_shape.to_vec(), delta)),
        }
    }

    fn propagate(&mut self, op: &Op, node_idx: usize, grad: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols();
                let (_, n) = self.value(*b).rows_cols();
                // dA = dOut @ B^T
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let da = matmul_raw(grad.data(), &bt, m, n, k);
                self.accumulate(*a, &[m, k], da);
                // dB = A^T @ dOut
                let at = transpose_raw(self.value(*a).data(), m, k);
                let db = matmul_raw(&at, grad.data(), k, m, n);
                self.accumulate(*b, &[k, n], db);
            }
            Op::Add(a, b) | Op::EmbeddingAdd(a, b) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(*a, &shape, grad.data().to_vec());
                self.accumulate(*b, &shape, grad.data().to_vec());
            }
            Op::Mul(a, b) => {
                let shape = self.value(*a).shape().to_vec();
                let da: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(g, bv)| g * bv)
                    .collect();
                let db: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, av)| g * av)
                    .collect();
                self.accumulate(*a, &shape, da);
                self.accumulate(*b, &shape, db);
            }
            Op::Scale(a, c) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(*a, &shape, grad.data().iter().map(|g| g * c).collect());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &self.value(*x).data()[r * cols..(r + 1) * cols];
                    let grow = &grad.data()[r * cols..(r + 1) * cols];
                    let (mean, rstd) = row_mean_rstd(row, *eps);
                    let mut dnorm_mean = 0.0;
                    let mut dnorm_norm_mean = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dnorm = grow[c] * self.value(*gamma).data()[c];
                        dnorm_mean += dnorm;
                        dnorm_norm_mean += dnorm * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    dnorm_mean /= cols as f64;
                    dnorm_norm_mean /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dnorm = grow[c] * self.value(*gamma).data()[c];
                        dx[r * cols + c] = (dnorm - dnorm_mean - xhat * dnorm_norm_mean) * rstd;
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                self.accumulate(*x, &xshape, dx);
                self.accumulate(*gamma, &[cols], dgamma);
                self.accumulate(*beta, &[cols], dbeta);
            }
            Op::Softmax { x, axis } => {
                let out = &self.nodes[node_idx].value;
                let lanes = lanes_for(out, *axis).expect("validated in forward");
                let mut dx = vec![0.0; out.len()];
                for lane in lanes {
                    let dot: f64 = lane
                        .iter()
                        .map(|&i| grad.data()[i] * out.data()[i])
                        .sum();
                    for &i in &lane {
                        dx[i] = out.data()[i] * (grad.data()[i] - dot);
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, &shape, dx);
            }
            Op::Gelu(a) => {
                let shape = self.value(*a).shape().to_vec();
                let dx: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(x, g)| gelu_bwd(*x) * g)
                    .collect();
                self.accumulate(*a, &shape, dx);
            }
            Op::Dropout { x, p, active } => {
                let shape = self.value(*x).shape().to_vec();
                let dx: Vec<f64> = if *active {
                    let scale = 1.0 / (1.0 - p);
                    grad.data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            if dropout_keep(self.dropout_seed, node_idx, i, *p) {
                                g * scale
                            } else {
                                0.0
                            }
                        })
                        .collect()
                } else {
                    grad.data().to_vec()
                };
                self.accumulate(*x, &shape, dx);
            }
            Op::Linear { x, w, b } => {
                let (rows, in_dim) = self.value(*x).rows_cols();
                let (_, out_dim) = self.value(*w).rows_cols();
                let wt = transpose_raw(self.value(*w).data(), in_dim, out_dim);
                let dx = matmul_raw(grad.data(), &wt, rows, out_dim, in_dim);
                let xt = transpose_raw(self.value(*x).data(), rows, in_dim);
                let dw = matmul_raw(&xt, grad.data(), in_dim, rows, out_dim);
                let mut db = vec![0.0; out_dim];
                for r in 0..rows {
                    for c in 0..out_dim {
                        db[c] += grad.data()[r * out_dim + c];
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                self.accumulate(*x, &xshape, dx);
                self.accumulate(*w, &[in_dim, out_dim], dw);
                self.accumulate(*b, &[out_dim], db);
            }
            Op::Mean { x, axis } => {
                let value = self.value(*x);
                let (rows, cols) = value.rows_cols();
                let shape = value.shape().to_vec();
                let mut dx = vec![0.0; value.len()];
                match (value.rank(), axis) {
                    (1, 0) => {
                        let g = grad.data()[0] / value.len() as f64;
                        dx.iter_mut().for_each(|v| *v = g);
                    }
                    (2, 0) => {
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] = grad.data()[c] / rows as f64;
                            }
                        }
                    }
                    (2, 1) => {
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] = grad.data()[r] / cols as f64;
                            }
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                self.accumulate(*x, &shape, dx);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let g = grad.data()[0];
                self.accumulate(*a, &shape, vec![g; self.value(*a).len()]);
            }
            Op::Transpose(a) => {
                let (rows, cols) = self.value(*a).rows_cols();
                // grad has shape (cols, rows); transpose back.
                let dx = transpose_raw(grad.data(), cols, rows);
                self.accumulate(*a, &[rows, cols], dx);
            }
            Op::ConcatRows(parts) => {
                let cols = self.value(parts[0]).rows_cols().1;
                let mut offset = 0usize;
                for &p in parts {
                    let pr = self.value(p).rows_cols().0;
                    let slice = grad.data()[offset * cols..(offset + pr) * cols].to_vec();
                    self.accumulate(p, &[pr, cols], slice);
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows_cols().0;
                let total: usize = parts.iter().map(|p| self.value(*p).rows_cols().1).sum();
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.value(p).rows_cols().1;
                    let mut dp = vec![0.0; rows * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&grad.data()[r * total + offset..r * total + offset + pc]);
                    }
                    self.accumulate(p, &[rows, pc], dp);
                    offset += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(grad.data());
                self.accumulate(*x, &[rows, cols], dx);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&grad.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, &[rows, cols], dx);
            }
            Op::WeightedCrossEntropy { logits, label, weight } => {
                let v = self.value(*logits);
                let n = v.len();
                let log_z = log_sum_exp(v.data());
                let g = grad.data()[0];
                let mut dx = vec![0.0; n];
                for (i, dxi) in dx.iter_mut().enumerate() {
                    let p = (v.data()[i] - log_z).exp();
                    let indicator = if i == *label { 1.0 } else { 0.0 };
                    *dxi = g * weight * (p - indicator);
                }
                self.accumulate(*logits, &[n], dx);
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn row_mean_rstd(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Index lanes along the softmaxed axis.
fn lanes_for(t: &Tensor, axis: usize) -> Option<Vec<Vec<usize>>> {
    match (t.rank(), axis) {
        (1, 0) => Some(vec![(0..t.len()).collect()]),
        (2, 1) => {
            let (rows, cols) = t.rows_cols();
            Some(
                (0..rows)
                    .map(|r| (r * cols..(r + 1) * cols).collect())
                    .collect(),
            )
        }
        (2, 0) => {
            let (rows, cols) = t.rows_cols();
            Some(
                (0..cols)
                    .map(|c| (0..rows).map(|r| r * cols + c).collect())
                    .collect(),
            )
        }
        _ => None,
    }
}

fn softmax_lane(input: &[f64], lane: &[usize], out: &mut [f64]) {
    let max = lane.iter().map(|&i| input[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in lane {
        let e = (input[i] - max).exp();
        out[i] = e;
        sum += e;
    }
    for &i in lane {
        out[i] /= sum;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let arg = GELU_S * (x + GELU_C * x * x * x);
    let t = arg.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

fn dropout_keep(seed: u64, node_id: usize, elem: usize, p: f64) -> bool {
    let key = splitmix64(
        seed.wrapping_add((node_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .wrapping_add((elem as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)),
    );
    crate::util::hash_unit_f64(key) >= p
}
