use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{contract, Error, Result};
use crate::linalg::gemm;
use crate::math;
use crate::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own mean and biased variance.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval { running_mean: &'a [f64], running_var: &'a [f64], eps: f64 },
}

/// Per-column statistics of a training-mode batch-norm forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-n) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a[n, m] + b[m]` broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    SubRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    /// Saved softmax weights (masked entries are zero).
    LogSumExpRows { input: Var, weights: Vec<f64> },
    /// Saved `softmax - onehot`, already divided by the row count.
    SoftmaxCrossEntropy { logits: Var, dlogits: Vec<f64> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves that require grad carry one.
    grad: Option<Tensor>,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward simply walks it in reverse. Leaves created
/// with [`Graph::param`] accumulate gradients across calls to
/// [`Graph::backward`]; call [`Graph::zero_grad`] between steps.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::StopGradient => "stop_gradient",
        Op::MatMul(..) => "matmul",
        Op::Add(..) | Op::AddRow(..) => "add",
        Op::Sub(..) | Op::SubRow(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::LogSumExpRows { .. } => "log_sum_exp_rows",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Transpose(..) => "transpose",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(String::from(op_name(&op))));
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: receives an accumulated gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        let grad = Some(Tensor::zeros(value.shape()));
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(contract!(
                "{}: shape mismatch {:?} vs {:?}",
                what,
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.val(v);
        if t.rank() != 2 {
            return Err(contract!("{} needs a matrix, got shape {:?}", what, t.shape()));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Row-broadcast compatibility: `b` is `[m]` or `[1, m]` and `a` is `[n, m]`.
    fn is_row_broadcast(&self, a: Var, b: Var) -> bool {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.rank() == 2
            && ta.shape() != tb.shape()
            && ((tb.rank() == 1 && tb.shape()[0] == ta.shape()[1])
                || (tb.rank() == 2 && tb.shape() == [1, ta.shape()[1]]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(contract!("matmul: inner dims {} vs {}", k, k2));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, self.val(a).data(), false, self.val(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        if self.is_row_broadcast(a, b) {
            let mut out = self.val(a).clone();
            let bias = self.val(b).data().to_vec();
            let m = bias.len();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += bias[i % m];
            }
            return self.push(out, Op::AddRow(a, b), rg);
        }
        self.check_same_shape(a, b, "add")?;
        let out = zip_map(self.val(a), self.val(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Elementwise difference; `b` may be a row vector broadcast over `a`'s rows.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        if self.is_row_broadcast(a, b) {
            let mut out = self.val(a).clone();
            let row = self.val(b).data().to_vec();
            let m = row.len();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x -= row[i % m];
            }
            return self.push(out, Op::SubRow(a, b), rg);
        }
        self.check_same_shape(a, b, "sub")?;
        let out = zip_map(self.val(a), self.val(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        let out = zip_map(self.val(a), self.val(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.val(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(math::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(math::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.val(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise `ln(sum_j exp(a_ij))` over the entries where `mask` is true
    /// (all entries when `mask` is `None`). Output is `[n, 1]`.
    ///
    /// Rows are shifted by their maximum before exponentiating. A row with no
    /// unmasked entry is a contract violation.
    pub fn log_sum_exp_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "log_sum_exp_rows")?;
        if let Some(mask) = mask {
            if mask.len() != n * m {
                return Err(contract!("log_sum_exp_rows: mask has {} entries for {}x{}", mask.len(), n, m));
            }
        }
        let keep = |idx: usize| mask.is_none_or(|mk| mk[idx]);
        let x = self.val(a).data();
        let mut out = Vec::with_capacity(n);
        let mut weights = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(i * m + j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(contract!("log_sum_exp_rows: row {} has no unmasked entries", i));
            }
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(i * m + j) {
                    let e = math::exp(v - max);
                    weights[i * m + j] = e;
                    s += e;
                }
            }
            for w in &mut weights[i * m..(i + 1) * m] {
                *w /= s;
            }
            out.push(max + math::ln(s));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, 1, out)?, Op::LogSumExpRows { input: a, weights }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(contract!("softmax_cross_entropy: {} labels for {} rows", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract!("softmax_cross_entropy: label {} out of range for {} classes", bad, c));
        }
        let x = self.val(logits).data();
        let mut dlogits = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let lse = math::log_sum_exp(row);
            total += lse - row[labels[i]];
            for j in 0..c {
                dlogits[i * c + j] = math::exp(row[j] - lse) / n as f64;
            }
            dlogits[i * c + labels[i]] -= 1.0 / n as f64;
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(total / n as f64), Op::SoftmaxCrossEntropy { logits, dlogits }, rg)
    }

    /// Divide every row by its Euclidean norm. Rows with norm `<= 1e-12` are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "l2_normalize_rows")?;
        let mut out = self.val(a).clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let norm = math::norm(row);
            if norm <= 1e-12 {
                return Err(Error::Degenerate(alloc::format!(
                    "l2_normalize_rows: row {} of {}x{} has norm {:e}",
                    i,
                    n,
                    m,
                    norm
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows { input: a, norms }, rg)
    }

    /// Column-wise batch normalization with affine `gamma`/`beta` (both `[m]`).
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, m) = self.matrix_dims(x, "batch_norm")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.val(v).len() != m {
                return Err(contract!("batch_norm: {} has {} entries for {} columns", what, self.val(v).len(), m));
            }
        }
        let xs = self.val(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if n < 2 {
                    return Err(contract!("batch_norm: training mode needs at least 2 rows, got {}", n));
                }
                let mut mean = vec![0.0; m];
                for i in 0..n {
                    add_into(&mut mean, &xs[i * m..(i + 1) * m]);
                }
                mean.iter_mut().for_each(|v| *v /= n as f64);
                let mut var = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let d = xs[i * m + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { running_mean, running_var, eps } => {
                if running_mean.len() != m || running_var.len() != m {
                    return Err(contract!("batch_norm: running statistics do not match {} columns", m));
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let h = (xs[i * m + j] - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = train.then_some(BatchStats { mean, var, count: n });
        let v = self.push(
            Tensor::matrix(n, m, out)?,
            Op::BatchNorm { input: x, gamma, beta, xhat, inv_std, train },
            rg,
        )?;
        Ok((v, stats))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let out = self.val(a).transpose()?;
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract!("concat_rows: no inputs"))?;
        let (_, m) = self.matrix_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != m {
                return Err(contract!("concat_rows: column mismatch {} vs {}", c, m));
            }
            data.extend_from_slice(self.val(p).data());
            rows += r;
            rg |= self.rg(p);
        }
        self.push(Tensor::matrix(rows, m, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "slice_rows")?;
        if range.start >= range.end || range.end > n {
            return Err(contract!("slice_rows: range {:?} invalid for {} rows", range, n));
        }
        let data = self.val(a).data()[range.start * m..range.end * m].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(range.len(), m, data)?, Op::SliceRows { input: a, start: range.start }, rg)
    }

    /// Identity on the forward pass; blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Adjoints of every node with respect to the scalar `output`.
    fn adjoints(&self, output: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.val(output).len() != 1 {
            return Err(contract!("backward needs a scalar output, got shape {:?}", self.val(output).shape()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(up) = adj[id].take() else { continue };
            self.propagate(id, &up, &mut adj);
            adj[id] = Some(up);
        }
        Ok(adj)
    }

    fn propagate(&self, id: usize, up: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        // Fetch (lazily zeroed) adjoint buffer for an input that needs it.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                adj[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let m = self.val(*b).shape()[1];
                if self.rg(*a) {
                    let bd = self.val(*b).data();
                    gemm(n, m, k, 1.0, up, false, bd, true, 1.0, slot!(*a));
                }
                if self.rg(*b) {
                    let ad = self.val(*a).data();
                    gemm(k, n, m, 1.0, ad, true, up, false, 1.0, slot!(*b));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(slot!(*a), up);
                }
                if self.rg(*b) {
                    add_into(slot!(*b), up);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(slot!(*a), up);
                }
                if self.rg(*b) {
                    slot!(*b).iter_mut().zip(up).for_each(|(d, u)| *d -= u);
                }
            }
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                if self.rg(*a) {
                    add_into(slot!(*a), up);
                }
                if self.rg(*b) {
                    let db = slot!(*b);
                    let m = db.len();
                    for (i, u) in up.iter().enumerate() {
                        db[i % m] += sign * u;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.val(*b).data();
                    for ((d, u), y) in slot!(*a).iter_mut().zip(up).zip(bd) {
                        *d += u * y;
                    }
                }
                if self.rg(*b) {
                    let ad = self.val(*a).data();
                    for ((d, u), x) in slot!(*b).iter_mut().zip(up).zip(ad) {
                        *d += u * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                for (d, u) in slot!(*a).iter_mut().zip(up) {
                    *d += u * s;
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                for ((d, u), xv) in slot!(*a).iter_mut().zip(up).zip(x) {
                    if *xv > 0.0 {
                        *d += u;
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                for ((d, u), yv) in slot!(*a).iter_mut().zip(up).zip(y) {
                    *d += u * yv;
                }
            }
            Op::Log(a) => {
                let x = self.val(*a).data();
                for ((d, u), xv) in slot!(*a).iter_mut().zip(up).zip(x) {
                    *d += u / xv;
                }
            }
            Op::Sum(a) => {
                let u = up[0];
                slot!(*a).iter_mut().for_each(|d| *d += u);
            }
            Op::Mean(a) => {
                let u = up[0] / self.val(*a).len() as f64;
                slot!(*a).iter_mut().for_each(|d| *d += u);
            }
            Op::LogSumExpRows { input, weights } => {
                let m = self.val(*input).shape()[1];
                for ((i, d), w) in slot!(*input).iter_mut().enumerate().zip(weights) {
                    *d += up[i / m] * w;
                }
            }
            Op::SoftmaxCrossEntropy { logits, dlogits } => {
                let u = up[0];
                for (d, g) in slot!(*logits).iter_mut().zip(dlogits) {
                    *d += u * g;
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let m = y.cols();
                let d = slot!(*input);
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let ur = &up[i * m..(i + 1) * m];
                    let proj = math::dot(yr, ur);
                    for j in 0..m {
                        d[i * m + j] += (ur[j] - yr[j] * proj) / norm;
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let m = inv_std.len();
                let n = up.len() / m;
                let g = self.val(*gamma).data();
                if self.rg(*gamma) {
                    let dg = slot!(*gamma);
                    for (i, u) in up.iter().enumerate() {
                        dg[i % m] += u * xhat[i];
                    }
                }
                if self.rg(*beta) {
                    let db = slot!(*beta);
                    for (i, u) in up.iter().enumerate() {
                        db[i % m] += u;
                    }
                }
                if self.rg(*input) {
                    let dx = slot!(*input);
                    if *train {
                        let mut sum_dh = vec![0.0; m];
                        let mut sum_dh_h = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                let dh = up[i * m + j] * g[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[i * m + j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..m {
                                let dh = up[i * m + j] * g[j];
                                dx[i * m + j] += inv_std[j] / nf
                                    * (nf * dh - sum_dh[j] - xhat[i * m + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for (i, u) in up.iter().enumerate() {
                            dx[i] += u * g[i % m] * inv_std[i % m];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let d = slot!(*a);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += up[j * r + i];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.rg(p) {
                        add_into(slot!(p), &up[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let m = self.val(*input).cols();
                let d = slot!(*input);
                add_into(&mut d[start * m..start * m + up.len()], up);
            }
        }
    }

    /// Backpropagate from the scalar `output`, adding into every parameter's
    /// gradient accumulator.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let adj = self.adjoints(output)?;
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (Some(g), Some(a)) = (node.grad.as_mut(), a) {
                add_into(g.data_mut(), &a);
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `output` with respect to node `wrt`, without
    /// touching the accumulators. Zero when `wrt` does not influence `output`
    /// through differentiable paths.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Tensor> {
        let adj = self.adjoints(output)?;
        let shape = self.val(wrt).shape().to_vec();
        match adj.into_iter().nth(wrt.0).flatten() {
            Some(data) => Tensor::new(shape, data),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape as input")
}
