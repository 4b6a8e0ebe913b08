//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto an immutable value buffer plus a
//! gradient buffer. Operations on tensors that require gradients record an
//! [`Op`] linking back to their inputs; [`Tensor::backward`] walks that graph
//! in reverse topological order.
//!
//! Gradients of leaf tensors accumulate across `backward` calls until
//! [`Tensor::zero_grad`] is called. Gradients of interior nodes are reset at
//! the start of every `backward` so that they always describe the most recent
//! pass; the attribution code reads them directly.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: OpKind, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Operation kinds understood by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Mul,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    EmbedLookup,
    Slice,
    Sum,
    LogSoftmaxPick,
    Scale,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::EmbedLookup => "embed_lookup",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::LogSoftmaxPick => "log_softmax_pick",
            OpKind::Scale => "scale",
        };
        f.write_str(s)
    }
}

/// Operation-specific attributes for [`forward_op`].
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub eps: Option<f64>,
    pub ids: Vec<usize>,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
    pub factor: f64,
}

/// Recorded operation with the inputs and forward intermediates its backward
/// rule needs.
enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    /// The rhs may be a `[n]` vector broadcast over the last axis.
    Add(Tensor, Tensor),
    /// The rhs may be a `[n]` vector broadcast over the last axis, or `[1]`.
    Mul(Tensor, Tensor),
    Relu(Tensor),
    Gelu(Tensor),
    Softmax(Tensor),
    LayerNorm {
        input: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    EmbedLookup {
        table: Tensor,
        ids: Vec<usize>,
    },
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    Sum(Tensor),
    LogSoftmaxPick {
        input: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Scale(Tensor, f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::LogSoftmaxPick { .. } => OpKind::LogSoftmaxPick,
            Op::Scale(..) => OpKind::Scale,
        }
    }

    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Scale(a, _) => vec![a],
            Op::LayerNorm { input, .. }
            | Op::Slice { input, .. }
            | Op::LogSoftmaxPick { input, .. } => vec![input],
            Op::EmbedLookup { table, .. } => vec![table],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: RefCell<Vec<f64>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Shared handle onto a tensor node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::kind))
            .finish()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, values: Vec<f64>, op: Option<Op>) -> Tensor {
        let requires_grad = op
            .as_ref()
            .map(|op| op.inputs().iter().any(|t| t.requires_grad()))
            .unwrap_or(false);
        let op = if requires_grad { op } else { None };
        let grad = if requires_grad {
            vec![0.0; values.len()]
        } else {
            Vec::new()
        };
        Tensor(Rc::new(Node {
            shape,
            values,
            grad: RefCell::new(grad),
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::check_new(shape, &values)?;
        Ok(Self::from_parts(shape.to_vec(), values, None))
    }

    /// Leaf tensor whose gradient is accumulated by `backward`.
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::check_new(shape, &values)?;
        let n = values.len();
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            values,
            grad: RefCell::new(vec![0.0; n]),
            requires_grad: true,
            op: None,
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![1], vec![v], None)
    }

    fn check_new(shape: &[usize], values: &[f64]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != values.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn numel(&self) -> usize {
        self.0.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.op.as_ref().map(Op::kind)
    }

    /// Copy of the gradient buffer (zeros for constants).
    pub fn grad(&self) -> Vec<f64> {
        let g = self.0.grad.borrow();
        if g.is_empty() {
            vec![0.0; self.numel()]
        } else {
            g.clone()
        }
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Single value of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        self.0.values[0]
    }

    fn accumulate(&self, delta: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut g = self.0.grad.borrow_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::Shape {
                op: OpKind::MatMul,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.values(), rhs.values(), &mut out, m, k, n);
        Ok(Self::from_parts(
            vec![m, n],
            out,
            Some(Op::MatMul(self.clone(), rhs.clone())),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: OpKind::Transpose,
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        let out = transpose_vals(self.values(), s[0], s[1]);
        Ok(Self::from_parts(
            vec![s[1], s[0]],
            out,
            Some(Op::Transpose(self.clone())),
        ))
    }

    fn broadcast_ok(&self, rhs: &Tensor, allow_scalar: bool) -> bool {
        let (a, b) = (self.shape(), rhs.shape());
        a == b
            || (b.len() == 1 && b[0] == *a.last().unwrap())
            || (allow_scalar && b == [1])
    }

    /// Elementwise add; `rhs` may be a bias vector over the last axis.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if !self.broadcast_ok(rhs, false) {
            return Err(TensorError::Shape {
                op: OpKind::Add,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let bv = rhs.values();
        let m = bv.len();
        let out = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, a)| a + bv[i % m])
            .collect();
        Ok(Self::from_parts(
            self.shape().to_vec(),
            out,
            Some(Op::Add(self.clone(), rhs.clone())),
        ))
    }

    /// Elementwise multiply; `rhs` may be a vector over the last axis or a
    /// `[1]` scalar.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if !self.broadcast_ok(rhs, true) {
            return Err(TensorError::Shape {
                op: OpKind::Mul,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let bv = rhs.values();
        let m = bv.len();
        let out = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, a)| a * bv[i % m])
            .collect();
        Ok(Self::from_parts(
            self.shape().to_vec(),
            out,
            Some(Op::Mul(self.clone(), rhs.clone())),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.values().iter().map(|&x| x.max(0.0)).collect();
        Self::from_parts(self.shape().to_vec(), out, Some(Op::Relu(self.clone())))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self.values().iter().map(|&x| gelu(x)).collect();
        Self::from_parts(self.shape().to_vec(), out, Some(Op::Gelu(self.clone())))
    }

    /// Softmax over the last axis. `-inf` entries map to exactly zero.
    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = rows_cols(self.shape());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.values()[r * cols..(r + 1) * cols];
            softmax_row(x, &mut out[r * cols..(r + 1) * cols]);
        }
        Self::from_parts(
            self.shape().to_vec(),
            out,
            Some(Op::Softmax(self.clone())),
        )
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine part; compose with `mul`/`add` for gain and bias).
    pub fn layernorm(&self, eps: f64) -> Result<Tensor> {
        if !(eps >= 0.0) {
            return Err(TensorError::Invalid {
                op: OpKind::LayerNorm,
                msg: format!("eps must be non-negative, got {eps}"),
            });
        }
        let (rows, cols) = rows_cols(self.shape());
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.values()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                xhat[r * cols + c] = (x[c] - mean) * rs;
            }
        }
        let values = xhat.clone();
        Ok(Self::from_parts(
            self.shape().to_vec(),
            values,
            Some(Op::LayerNorm {
                input: self.clone(),
                xhat,
                rstd,
            }),
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embed_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(TensorError::Invalid {
                op: OpKind::EmbedLookup,
                msg: format!("table {s:?} with {} ids", ids.len()),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: OpKind::EmbedLookup,
                msg: format!("id {bad} out of range for vocabulary {v}"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.values()[i * d..(i + 1) * d]);
        }
        Ok(Self::from_parts(
            vec![ids.len(), d],
            out,
            Some(Op::EmbedLookup {
                table: self.clone(),
                ids: ids.to_vec(),
            }),
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis` (0 or 1) of a
    /// vector or matrix.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        let bad = || TensorError::Invalid {
            op: OpKind::Slice,
            msg: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
        };
        if axis >= s.len() || s.len() > 2 || len == 0 || start + len > s[axis] {
            return Err(bad());
        }
        let (shape, out) = if s.len() == 1 {
            (vec![len], self.values()[start..start + len].to_vec())
        } else if axis == 0 {
            let c = s[1];
            (vec![len, c], self.values()[start * c..(start + len) * c].to_vec())
        } else {
            let (r, c) = (s[0], s[1]);
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&self.values()[i * c + start..i * c + start + len]);
            }
            (vec![r, len], out)
        };
        Ok(Self::from_parts(
            shape,
            out,
            Some(Op::Slice {
                input: self.clone(),
                axis,
                start,
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Self::from_parts(vec![1], vec![s], Some(Op::Sum(self.clone())))
    }

    /// Sum over rows of `log_softmax(row)[target]`.
    pub fn log_softmax_pick(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self.shape());
        if targets.len() != rows {
            return Err(TensorError::Invalid {
                op: OpKind::LogSoftmaxPick,
                msg: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::Invalid {
                op: OpKind::LogSoftmaxPick,
                msg: format!("target {bad} out of range for {cols} classes"),
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let x = &self.values()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(x);
            total += x[targets[r]] - lse;
            for c in 0..cols {
                probs[r * cols + c] = (x[c] - lse).exp();
            }
        }
        Ok(Self::from_parts(
            vec![1],
            vec![total],
            Some(Op::LogSoftmaxPick {
                input: self.clone(),
                targets: targets.to_vec(),
                probs,
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.values().iter().map(|v| v * factor).collect();
        Self::from_parts(
            self.shape().to_vec(),
            out,
            Some(Op::Scale(self.clone(), factor)),
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate(&[1.0]);
        for t in order.iter().rev() {
            if let Some(op) = &t.0.op {
                let g = t.0.grad.borrow().clone();
                backprop(op, t, &g);
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, inputs before
    /// consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut order = Vec::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = G · Bᵀ
                let bt = transpose_vals(b.values(), k, n);
                let mut da = vec![0.0; m * k];
                matmul_into(g, &bt, &mut da, m, n, k);
                a.accumulate(&da);
            }
            if b.requires_grad() {
                // dB = Aᵀ · G
                let at = transpose_vals(a.values(), m, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, g, &mut db, k, m, n);
                b.accumulate(&db);
            }
        }
        Op::Transpose(a) => {
            let s = out.shape();
            a.accumulate(&transpose_vals(g, s[0], s[1]));
        }
        Op::Add(a, b) => {
            a.accumulate(g);
            if b.requires_grad() {
                if b.numel() == g.len() {
                    b.accumulate(g);
                } else {
                    b.accumulate(&reduce_to(g, b.numel()));
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (a.values(), b.values());
            let m = bv.len();
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % m]).collect();
                a.accumulate(&da);
            }
            if b.requires_grad() {
                let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                if m == g.len() {
                    b.accumulate(&prod);
                } else {
                    b.accumulate(&reduce_to(&prod, m));
                }
            }
        }
        Op::Relu(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.values())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            a.accumulate(&da);
        }
        Op::Gelu(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.values())
                .map(|(gi, &x)| gi * gelu_grad(x))
                .collect();
            a.accumulate(&da);
        }
        Op::Softmax(a) => {
            let (rows, cols) = rows_cols(out.shape());
            let y = out.values();
            let mut da = vec![0.0; rows * cols];
            for r in 0..rows {
                let ys = &y[r * cols..(r + 1) * cols];
                let gs = &g[r * cols..(r + 1) * cols];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for c in 0..cols {
                    da[r * cols + c] = ys[c] * (gs[c] - dot);
                }
            }
            a.accumulate(&da);
        }
        Op::LayerNorm { input, xhat, rstd } => {
            let (rows, cols) = rows_cols(out.shape());
            let nf = cols as f64;
            let mut da = vec![0.0; rows * cols];
            for r in 0..rows {
                let gs = &g[r * cols..(r + 1) * cols];
                let xs = &xhat[r * cols..(r + 1) * cols];
                let mean_g = gs.iter().sum::<f64>() / nf;
                let mean_gx = gs.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>() / nf;
                for c in 0..cols {
                    da[r * cols + c] = rstd[r] * (gs[c] - mean_g - xs[c] * mean_gx);
                }
            }
            input.accumulate(&da);
        }
        Op::EmbedLookup { table, ids } => {
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (row, &i) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[i * d + c] += g[row * d + c];
                }
            }
            table.accumulate(&dt);
        }
        Op::Slice { input, axis, start } => {
            let s = input.shape();
            let mut di = vec![0.0; input.numel()];
            if s.len() == 1 {
                di[*start..*start + g.len()].copy_from_slice(g);
            } else if *axis == 0 {
                let c = s[1];
                di[start * c..start * c + g.len()].copy_from_slice(g);
            } else {
                let (r, c) = (s[0], s[1]);
                let len = out.shape()[1];
                for i in 0..r {
                    di[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
            }
            input.accumulate(&di);
        }
        Op::Sum(a) => {
            a.accumulate(&vec![g[0]; a.numel()]);
        }
        Op::LogSoftmaxPick {
            input,
            targets,
            probs,
        } => {
            let cols = *input.shape().last().unwrap();
            let mut da: Vec<f64> = probs.iter().map(|p| -g[0] * p).collect();
            for (r, &t) in targets.iter().enumerate() {
                da[r * cols + t] += g[0];
            }
            input.accumulate(&da);
        }
        Op::Scale(a, f) => {
            let da: Vec<f64> = g.iter().map(|gi| gi * f).collect();
            a.accumulate(&da);
        }
    }
}

/// Generic entry point mirroring the typed methods.
pub fn forward_op(kind: OpKind, inputs: &[&Tensor], attrs: &OpAttrs) -> Result<Tensor> {
    let arity = match kind {
        OpKind::MatMul | OpKind::Add | OpKind::Mul => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(TensorError::Invalid {
            op: kind,
            msg: format!("expected {arity} inputs, got {}", inputs.len()),
        });
    }
    let a = inputs[0];
    match kind {
        OpKind::MatMul => a.matmul(inputs[1]),
        OpKind::Transpose => a.transpose(),
        OpKind::Add => a.add(inputs[1]),
        OpKind::Mul => a.mul(inputs[1]),
        OpKind::Relu => Ok(a.relu()),
        OpKind::Gelu => Ok(a.gelu()),
        OpKind::Softmax => Ok(a.softmax()),
        OpKind::LayerNorm => a.layernorm(attrs.eps.unwrap_or(1e-5)),
        OpKind::EmbedLookup => a.embed_lookup(&attrs.ids),
        OpKind::Slice => a.slice(attrs.axis, attrs.start, attrs.len),
        OpKind::Sum => Ok(a.sum()),
        OpKind::LogSoftmaxPick => a.log_softmax_pick(&attrs.ids),
        OpKind::Scale => Ok(a.scale(attrs.factor)),
    }
}

// ------------------------------------------------------------ kernels

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_vals(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn reduce_to(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    if m == 1 {
        out[0] = g.iter().sum();
    } else {
        for (i, gi) in g.iter().enumerate() {
            out[i % m] += gi;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

/// d/dx of the tanh-approximated GELU:
/// 0.5(1 + t) + 0.5 x (1 - t²) √(2/π) (1 + 3c x²), t = tanh(√(2/π)(x + c x³)).
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Compares autodiff against central differences.
///
/// Returns `max_i |autodiff_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid {
            op: OpKind::Sum,
            msg: format!("step must be positive, got {step}"),
        });
    }
    let leaf = Tensor::leaf(shape, x.to_vec())?;
    let y = f(&leaf)?;
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    y.backward()?;
    let auto = leaf.grad();
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = x[i] - step;
        let fm = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = x[i];
        let fd = (fp - fm) / (2.0 * step);
        if !fd.is_finite() || !auto[i].is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        worst = worst.max((auto[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
