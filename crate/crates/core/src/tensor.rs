//! Dense row-major `f64` tensors and a minimal reverse-mode autodiff tape.
//!
//! Values live on a [`Tape`]; operations append nodes and return a [`Var`]
//! handle. Because nodes are appended in evaluation order, the tape is always
//! topologically sorted and the backward pass is a single reverse sweep.
//!
//! Broadcasting is limited to adding (or subtracting) one row vector to every
//! row of a matrix, which covers layer biases and baseline-logit refinement.

use crate::error::{Error, Result};
use crate::gradient::GradientVector;

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a leaf tensor. Rejects shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("leaf tensor contains {bad}")));
        }
        Ok(Self { shape, data })
    }

    // Internal constructor for computed values; finiteness is checked at the
    // loss level instead.
    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, values.len()], values)
    }

    /// Stacks equal-length rows into an `m × n` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {} but row 0 has {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix (all leading dims folded).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Iterates over rows of the matrix view.
    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m×k] · b[k×n]` on raw row-major buffers.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of one row.
pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Row-wise softmax over the last dimension.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.cols() < 2 {
        return Err(Error::Dimension(format!(
            "softmax needs at least 2 classes, got shape {:?}",
            z.shape
        )));
    }
    let data = z.iter_rows().flat_map(softmax_row).collect();
    Ok(Tensor::from_parts(z.shape.clone(), data))
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x[m×n] + r[n]` broadcast over rows.
    AddRow(Var, Var),
    /// `x[m×n] - r[n]` broadcast over rows.
    SubRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Selects one column of a matrix, producing `m × 1`.
    Column(Var, usize),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a leaf. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the most recent [`Tape::backward`], if `v` is a
    /// grad-requiring leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul lhs")?;
        let (k2, n) = self.value(b).matrix_dims("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m}×{k}] · [{k2}×{n}]"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, sign: f64) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(r);
        let cols = xv.cols();
        if rv.numel() != cols {
            return Err(Error::Dimension(format!(
                "row broadcast needs {cols} values, got shape {:?}",
                rv.shape()
            )));
        }
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(a, b)| a + sign * b))
            .collect();
        let shape = xv.shape().to_vec();
        let op = if sign > 0.0 {
            Op::AddRow(x, r)
        } else {
            Op::SubRow(x, r)
        };
        let rg = self.any_grad(&[x, r]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Adds the row vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, 1.0)
    }

    /// Subtracts the row vector `r` from every row of `x`.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, -1.0)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() < 2 {
            return Err(Error::Dimension(format!(
                "log-softmax needs at least 2 classes, got shape {:?}",
                xv.shape()
            )));
        }
        let data = xv.iter_rows().flat_map(log_softmax_row).collect();
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x), rg))
    }

    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.matrix_dims("column")?;
        if col >= n {
            return Err(Error::Dimension(format!("column {col} out of range for {n} columns")));
        }
        let data = (0..m).map(|i| xv.data()[i * n + col]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, 1], data), Op::Column(x, col), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(vec![1], vec![total]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from the scalar `loss`. Clears gradients left by any
    /// previous backward call, then stores fresh ones on every grad-requiring
    /// leaf reachable from `loss`; unreachable leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss value {}",
                self.value(loss).data()[0]
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    self.nodes[idx].grad = Some(Tensor::from_parts(node.value.shape.clone(), g));
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.shape[1];
                    if self.requires_grad(a) {
                        // dA = dY · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bv.data[p * n..(p + 1) * n];
                                da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut adj, a, da);
                    }
                    if self.requires_grad(b) {
                        // dB = Aᵀ · dY
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av.data[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *d += a_ip * gv;
                                }
                            }
                        }
                        accumulate(&mut adj, b, db);
                    }
                }
                Op::AddRow(x, r) | Op::SubRow(x, r) => {
                    let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                    let cols = node.value.cols();
                    if self.requires_grad(r) {
                        let mut dr = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            for (d, v) in dr.iter_mut().zip(row) {
                                *d += sign * v;
                            }
                        }
                        accumulate(&mut adj, r, dr);
                    }
                    if self.requires_grad(x) {
                        accumulate(&mut adj, x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g.iter().map(|v| -v).collect());
                    }
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        let d = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj, a, d);
                    }
                    if self.requires_grad(b) {
                        let d = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj, b, d);
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut adj, x, g.iter().map(|v| v * f).collect());
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, x, d);
                }
                Op::Softmax(x) => {
                    // dx = y ⊙ (dy − ⟨dy, y⟩) per row
                    let cols = node.value.cols();
                    let mut d = Vec::with_capacity(g.len());
                    for (g_row, y_row) in g.chunks(cols).zip(node.value.data.chunks(cols)) {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        d.extend(g_row.iter().zip(y_row).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    accumulate(&mut adj, x, d);
                }
                Op::LogSoftmax(x) => {
                    // dx = dy − softmax ⊙ Σ dy per row
                    let cols = node.value.cols();
                    let mut d = Vec::with_capacity(g.len());
                    for (g_row, ls_row) in g.chunks(cols).zip(node.value.data.chunks(cols)) {
                        let total: f64 = g_row.iter().sum();
                        d.extend(g_row.iter().zip(ls_row).map(|(gv, lv)| gv - lv.exp() * total));
                    }
                    accumulate(&mut adj, x, d);
                }
                Op::Column(x, col) => {
                    let xv = self.value(x);
                    let n = xv.cols();
                    let mut d = vec![0.0; xv.numel()];
                    for (i, gv) in g.iter().enumerate() {
                        d[i * n + col] = *gv;
                    }
                    accumulate(&mut adj, x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(x).numel();
                    accumulate(&mut adj, x, vec![g[0]; n]);
                }
            }
        }

        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Mean cross-entropy of `logits[n×C]` against hard labels, via fused log-softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).matrix_dims("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    let targets = one_hot(labels, c)?;
    soft_cross_entropy(tape, logits, &targets, n as f64)
}

/// `−(1/denom) Σ_i Σ_c target[i,c] · log_softmax(logits)[i,c]`.
///
/// Rows of `targets` may be soft distributions or masked to zero.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor, denom: f64) -> Result<Var> {
    let log_probs = tape.log_softmax(logits)?;
    let t = tape.constant(targets.clone());
    let weighted = tape.mul(log_probs, t)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / denom))
}

/// One-hot encodes zero-based class labels into an `n × classes` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label(format!(
                "label {y} outside 0..{classes} at row {i}"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<GradientVector>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned {plus} / {minus} while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(GradientVector::new(grad))
}
