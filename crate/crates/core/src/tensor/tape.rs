//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every call on [`Tape`] appends one node whose inputs were appended
//! earlier, so the node list is already in topological order and the
//! backward pass is a single reverse sweep.

use super::kernels;
use super::Tensor;
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied operation: receives the
/// input values, the output value and the upstream gradient, and returns
/// one gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    RmsNorm { x: Var, gain: Var, xn: Vec<f64>, inv_rms: Vec<f64> },
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MeanRows(Var),
    L2Norm(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an append-only list of operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            bail!(Dimension, "{what}: shapes {sa:?} and {sb:?} differ");
        }
        Ok(())
    }

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("kernel output has consistent shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions differ: {m}x{k} by {k2}x{n}");
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).len() != n {
            bail!(Dimension, "add_row: row of length {} for {m}x{n}", self.value(row).len());
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(d, b)| *d += b);
        }
        let rg = self.rg(&[x, row]);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        t.grad = None;
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    fn check_scalar(&self, s: Var, what: &str) -> Result<f64> {
        if !self.value(s).is_scalar() {
            bail!(Dimension, "{what}: expected a scalar, got shape {:?}", self.value(s).shape());
        }
        Ok(self.scalar_value(s))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s, "mul_scalar")?;
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        t.grad = None;
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    /// Adds the scalar node `s` to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s, "add_scalar")?;
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        t.grad = None;
        t.data_mut().iter_mut().for_each(|v| *v += c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::AddScalar(x, s), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg)
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if !self.value(x).is_finite() {
            bail!(Numeric, "{what}: non-finite input");
        }
        Ok(())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax_rows")?;
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[x]);
        Ok(self.push(Self::matrix(m, n, data), Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax_rows")?;
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Self::matrix(m, n, data), Op::LogSoftmaxRows(x), rg))
    }

    /// Per-row layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            bail!(Dimension, "layer_norm: gain/bias length must equal {n}");
        }
        if eps < 0.0 {
            bail!(Contract, "layer_norm: eps must be non-negative");
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            // zero-variance rows with eps = 0 normalise to zero
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Per-row RMS normalisation: `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n {
            bail!(Dimension, "rms_norm: gain length must equal {n}");
        }
        if eps <= 0.0 {
            bail!(Contract, "rms_norm: eps must be positive");
        }
        let (xv, g) = (self.value(x).data(), self.value(gain).data());
        let mut xn = vec![0.0; m * n];
        let mut inv_rms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[i] = inv;
            for j in 0..n {
                let h = row[j] * inv;
                xn[i * n + j] = h;
                out[i * n + j] = h * g[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, xn, inv_rms }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        t.grad = None;
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    /// Elementwise `ln(1 + e^x)`; `softplus(-z)` is `-ln σ(z)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums each row of an `m×n` matrix into an `m×1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let data = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Self::matrix(m, 1, data), Op::RowSum(x), rg)
    }

    /// Averages the rows of an `m×n` matrix into a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut data = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.rg(&[x]);
        self.push(Self::matrix(1, n, data), Op::MeanRows(x), rg)
    }

    /// Euclidean norm of all elements; the subgradient at zero is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).frobenius_norm();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::L2Norm(x), rg)
    }

    /// Mean next-token negative log-likelihood over all positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x)).collect();
        self.masked_cross_entropy(logits, &t)
    }

    /// Cross-entropy averaged over positions whose target is `Some`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check_finite(logits, "cross_entropy")?;
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            bail!(Dimension, "cross_entropy: {} targets for {m} rows", targets.len());
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            bail!(Input, "cross_entropy: no scored positions");
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                bail!(Index, "cross_entropy: target {t} out of range for vocabulary {n}");
            }
            let row = &lv[i * n..(i + 1) * n];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(total / count as f64), op, rg))
    }

    /// Selects rows by index; repeated indices are allowed (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.is_empty() {
            bail!(Input, "gather_rows: empty index list");
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                bail!(Index, "gather_rows: row {i} out of range for {m} rows");
            }
            data.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Self::matrix(idx.len(), n, data), Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Writes row `r` of `x` to row `idx[r]` of a zero `rows×n` matrix (summing collisions).
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.len() != m {
            bail!(Dimension, "scatter_rows: {} indices for {m} rows", idx.len());
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                bail!(Index, "scatter_rows: row {i} out of range for {rows} rows");
            }
            data[i * n..(i + 1) * n].iter_mut().zip(&xv[r * n..(r + 1) * n]).for_each(|(d, v)| *d += v);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Self::matrix(rows, n, data), Op::ScatterRows(x, idx.to_vec()), rg))
    }

    /// Column slice `[start, start + len)`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            bail!(Dimension, "cols: [{start}, {}) outside {n} columns", start + len);
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Self::matrix(m, len, data), Op::Cols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Input, "concat_cols: nothing to concatenate") };
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            bail!(Dimension, "concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Self::matrix(m, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Reverse sweep from a scalar root; gradients become available via [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            bail!(Contract, "backward root must be scalar, got shape {:?}", self.value(root).shape());
        }
        if root.0 >= self.nodes.len() {
            bail!(Contract, "backward root is not on this tape");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                acc(*a, &mut |da| kernels::matmul_nt(g, val(*b).data(), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn(val(*a).data(), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((x, y), z)| *x += y * z));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((x, y), z)| *x += y * z));
            }
            Op::AddRow(x, row) => {
                let n = val(*x).dims2().1;
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            Op::MulScalar(x, s) => {
                let c = val(*s).item();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
                if needs(*s) {
                    let dot = kernels::dot(g, val(*x).data());
                    acc(*s, &mut |d| d[0] += dot);
                }
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |d| add_into(d, g));
                if needs(*s) {
                    let total: f64 = g.iter().sum();
                    acc(*s, &mut |d| d[0] += total);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2();
                // output is n×m
                let gt = kernels::transpose(g, n, m);
                acc(*x, &mut |d| add_into(d, &gt));
            }
            Op::SoftmaxRows(x) => {
                let n = out.dims2().1;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let s = kernels::dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = out.dims2().1;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = out.dims2().1;
                let gv = val(*gain).data();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        d.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(a, (b, c))| *a += b * c);
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = kernels::dot(&dh, hrow);
                        let inv = inv_std[r];
                        for j in 0..n {
                            drow[j] += inv / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, xn, inv_rms } => {
                let n = out.dims2().1;
                let gv = val(*gain).data();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xn.chunks(n)) {
                        d.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(a, (b, c))| *a += b * c);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xn[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let proj = kernels::dot(&dh, hrow) / n as f64;
                        for j in 0..n {
                            drow[j] += (dh[j] - hrow[j] * proj) * inv_rms[r];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((a, b), v)| *a += b * kernels::gelu_grad(*v))
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((a, b), v)| *a += b * kernels::sigmoid(*v))
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let c = g[0] / val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += c));
            }
            Op::RowSum(x) => {
                let n = val(*x).dims2().1;
                acc(*x, &mut |d| {
                    for (drow, gi) in d.chunks_mut(n).zip(g) {
                        drow.iter_mut().for_each(|a| *a += gi);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = val(*x).dims2();
                acc(*x, &mut |d| {
                    for drow in d.chunks_mut(n) {
                        drow.iter_mut().zip(g).for_each(|(a, b)| *a += b / m as f64);
                    }
                });
            }
            Op::L2Norm(x) => {
                let norm = out.item();
                if norm > 0.0 {
                    let xv = val(*x).data();
                    acc(*x, &mut |d| d.iter_mut().zip(xv).for_each(|(a, v)| *a += g[0] * v / norm));
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let n = val(*logits).dims2().1;
                let c = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let drow = &mut d[i * n..(i + 1) * n];
                        let prow = &probs[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] += c * prow[j];
                        }
                        drow[t] -= c;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = val(*x).dims2().1;
                acc(*x, &mut |d| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut d[row * n..(row + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows(x, idx) => {
                let n = val(*x).dims2().1;
                acc(*x, &mut |d| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[row * n..(row + 1) * n]);
                    }
                });
            }
            Op::Cols(x, start) => {
                let n = val(*x).dims2().1;
                let len = out.dims2().1;
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Custom(inputs, backward) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let local = backward(&ins, out, g);
                for (&v, lg) in inputs.iter().zip(local) {
                    acc(v, &mut |d| add_into(d, &lg));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[11.0]);

        let z = t.constant(Tensor::zeros(&[2, 3]));
        let any = t.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 4.0, 9.0, -1.0]).unwrap());
        let zp = t.matmul(z, any).unwrap();
        assert_eq!(t.value(zp).data(), &[0.0; 4]);

        assert!(matches!(t.matmul(a, a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let s = t.softmax_rows(x).unwrap();
        for &v in t.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let y = t.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let s = t.softmax_rows(y).unwrap();
        assert!(close(t.value(s).get(0, 0), 0.25, 1e-12));
        assert!(close(t.value(s).get(0, 1), 0.75, 1e-12));

        let nan = t.constant(Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap());
        assert!(matches!(t.softmax_rows(nan), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let ones = t.constant(Tensor::filled(&[3], 1.0));
        let zeros = t.constant(Tensor::zeros(&[3]));
        let c = t.constant(Tensor::from_rows(&[vec![4.0, 4.0, 4.0]]).unwrap());
        let y = t.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = t.constant(Tensor::filled(&[2], 1.0));
        let b2 = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let y = t.layer_norm(x, g2, b2, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -1.0]);

        let g0 = t.constant(Tensor::zeros(&[3]));
        let b = t.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 5.0, -3.0]]).unwrap());
        let y = t.layer_norm(x, g0, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.7));

        assert!(matches!(t.layer_norm(x, g2, b2, 1e-5), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let v = 7;
        let u = t.constant(Tensor::zeros(&[3, v]));
        let l = t.cross_entropy(u, &[0, 3, 6]).unwrap();
        assert!(close(t.scalar_value(l), (v as f64).ln(), 1e-12));

        let mut peaked = Tensor::zeros(&[1, 4]);
        peaked.data_mut()[2] = 30.0;
        let p = t.constant(peaked);
        let l = t.cross_entropy(p, &[2]).unwrap();
        assert!(t.scalar_value(l) < 1e-9);

        let r = t.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let l = t.cross_entropy(r, &[1]).unwrap();
        assert!(close(t.scalar_value(l), -(0.75f64).ln(), 1e-12));
        assert!(close(t.scalar_value(l), 0.2877, 1e-4));

        assert!(matches!(t.cross_entropy(r, &[2]), Err(crate::Error::Index(_))));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, -4.0, 0.5]);

        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        // f(x) + g(x) with f = sum(x⊙x), g = sum(3x)
        let x0 = Tensor::vector(vec![0.5, -1.25, 2.0]);
        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let r = build(&mut t, x);
            t.backward(r).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let f = |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x).unwrap();
            t.sum(sq)
        };
        let g = |t: &mut Tape, x: Var| {
            let s = t.scale(x, 3.0);
            t.sum(s)
        };
        let both = grad_of(&|t, x| {
            let a = f(t, x);
            let b = g(t, x);
            t.add(a, b).unwrap()
        });
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        for i in 0..3 {
            assert_eq!(both[i], gf[i] + gg[i]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = t.param(Tensor::vector(vec![3.0, 4.0]));
        let prod = t.mul(c, p).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(p).unwrap(), &[1.0, 2.0]);
    }
}
