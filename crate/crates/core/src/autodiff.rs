//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order (a valid topological order) and pushes vector-Jacobian products to
//! the inputs. Parameters enter the tape through [`Tape::param`] and
//! [`Tape::embedding`]; their gradients are collected per [`ParamSet`] slot.
//!
//! Row-wise operations view a 1-D tensor as a single row.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Lower clamp for the probability inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance epsilon of layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        slot: usize,
        id: ParamId,
    },
    Embedding {
        slot: usize,
        id: ParamId,
        ids: Vec<usize>,
        table_len: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Mse(Var, Var),
    CrossEntropy {
        p: Var,
        gold: usize,
        clamped: bool,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph. Not shared between threads; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<Vec<Option<Vec<f64>>>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::input`] with
    /// `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients for the set registered under `slot`.
    pub fn slot(&self, slot: usize) -> &[Option<Vec<f64>>] {
        self.params.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adds the parameter gradients of `other` into `self`; node gradients
    /// are dropped.
    pub fn merge(&mut self, other: &Gradients) {
        self.nodes.clear();
        if self.params.len() < other.params.len() {
            self.params.resize_with(other.params.len(), Vec::new);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.len() < theirs.len() {
                mine.resize(theirs.len(), None);
            }
            for (m, t) in mine.iter_mut().zip(theirs) {
                let Some(t) = t else { continue };
                match m {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *m = Some(t.clone()),
                }
            }
        }
    }

    /// Accumulates this pass's gradients into the buffers of `set`.
    pub fn apply_to(&self, set: &mut ParamSet) -> Result<()> {
        set.accumulate(self.slot(set.slot()))
    }

    fn add_param(&mut self, slot: usize, id: ParamId, len: usize) -> &mut Vec<f64> {
        if self.params.len() <= slot {
            self.params.resize_with(slot + 1, Vec::new);
        }
        let bucket = &mut self.params[slot];
        if bucket.len() <= id.0 {
            bucket.resize(id.0 + 1, None);
        }
        bucket[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `out[m,n] = a[m,k] · b[k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.detached(), Op::Leaf, requires_grad)
    }

    /// Brings a parameter onto the tape.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let t = set.get(id);
        let needs = t.requires_grad();
        self.push(
            t.detached(),
            Op::Param {
                slot: set.slot(),
                id,
            },
            needs,
        )
    }

    /// Gathers rows `ids` of a `[vocab, dim]` parameter table.
    pub fn embedding(&mut self, set: &ParamSet, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = set.get(id);
        let (rows, cols) = table.rows_cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Tokenization(format!(
                    "token id {i} outside vocabulary of size {rows}"
                )));
            }
            data.extend_from_slice(&table.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        let needs = table.requires_grad();
        Ok(self.push(
            value,
            Op::Embedding {
                slot: set.slot(),
                id,
                ids: ids.to_vec(),
                table_len: table.len(),
            },
            needs,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same length");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.rows_cols();
        if tr.len() != n {
            return Err(Error::shape(format!(
                "add_row: row of length {} against {n} columns",
                tr.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            data[r * n..(r + 1) * n]
                .iter_mut()
                .zip(tr.data())
                .for_each(|(d, b)| *d += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), needs))
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.rows_cols();
        let (k2, n) = tb.rows_cols();
        if k != k2 || tb.shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul: {:?} · {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let value = Tensor::matrix(m, n, matmul_nn(ta.data(), tb.data(), m, k, n))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `[m, k] · [n, k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.rows_cols();
        let (n, k2) = tb.rows_cols();
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_t: {:?} · {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let value = Tensor::matrix(m, n, matmul_nt(ta.data(), tb.data(), m, k, n))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulT(a, b), needs))
    }

    /// Exact Gaussian error linear unit, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::NumericalInput(
                "gelu input contains NaN or Inf".into(),
            ));
        }
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gelu(x), needs))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        if t.is_empty() || cols == 0 {
            return Err(Error::shape("softmax of an empty vector"));
        }
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), rows, cols))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), needs))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::shape(
                "layer_norm: gain/bias length must equal columns",
            ));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let src = &tx.data()[r * cols..(r + 1) * cols];
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (src[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Concatenates matrices with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Mean of the rows selected by `mask`, as a `[1, cols]` matrix.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        if mask.len() != rows {
            return Err(Error::shape(
                "masked_mean_rows: mask length must equal rows",
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::shape("masked_mean_rows: no row selected"));
        }
        let mut out = vec![0.0; cols];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            out.iter_mut()
                .zip(&t.data()[r * cols..(r + 1) * cols])
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let value = Tensor::matrix(1, cols, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Mean over all elements of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mse")?;
        if ta.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / ta.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mse(a, b), needs))
    }

    /// `-ln(max(p[gold], 1e-12))` for a probability vector.
    pub fn cross_entropy(&mut self, probabilities: Var, gold: usize) -> Result<Var> {
        let t = self.value(probabilities);
        let (rows, cols) = t.rows_cols();
        if rows != 1 {
            return Err(Error::shape(
                "cross_entropy expects a single probability vector",
            ));
        }
        if gold >= cols {
            return Err(Error::Label(format!(
                "gold class {gold} outside {cols} classes"
            )));
        }
        let total: f64 = t.data().iter().sum();
        if (total - 1.0).abs() > 1e-6 || t.data().iter().any(|&p| p < 0.0) {
            return Err(Error::NumericalInput(format!(
                "probabilities must be non-negative and sum to 1 (sum {total})"
            )));
        }
        let p = t.data()[gold];
        let clamped = p < LOG_CLAMP;
        let value = Tensor::scalar(-p.max(LOG_CLAMP).ln());
        let needs = self.needs(probabilities);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                p: probabilities,
                gold,
                clamped,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Mean(x), needs)
    }

    /// Computes gradients of the scalar `loss` without touching any parameter set.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::default();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let val = |v: Var| &self.nodes[v.0].value;

            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param { slot, id } => {
                    let buf = out.add_param(*slot, *id, g.len());
                    buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Embedding {
                    slot,
                    id,
                    ids,
                    table_len,
                } => {
                    let cols = node.value.rows_cols().1;
                    let buf = out.add_param(*slot, *id, *table_len);
                    for (r, &tok) in ids.iter().enumerate() {
                        buf[tok * cols..(tok + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if needs(*b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if needs(*b) {
                        add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let c = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[a.0], c);
                    }
                    if needs(*b) {
                        let c = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[b.0], c);
                    }
                }
                Op::Scale(a, f) => {
                    if needs(*a) {
                        add_into(&mut grads[a.0], g.iter().map(|v| v * f).collect());
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(*row) {
                        let n = val(*row).len();
                        let mut c = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            c.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        add_into(&mut grads[row.0], c);
                    }
                    if needs(*x) {
                        add_into(&mut grads[x.0], g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).rows_cols();
                    let n = val(*b).rows_cols().1;
                    if needs(*a) {
                        add_into(&mut grads[a.0], matmul_nt(&g, val(*b).data(), m, n, k));
                    }
                    if needs(*b) {
                        add_into(&mut grads[b.0], matmul_tn(val(*a).data(), &g, m, k, n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = val(*a).rows_cols();
                    let n = val(*b).rows_cols().0;
                    if needs(*a) {
                        add_into(&mut grads[a.0], matmul_nn(&g, val(*b).data(), m, n, k));
                    }
                    if needs(*b) {
                        add_into(&mut grads[b.0], matmul_tn(&g, val(*a).data(), m, n, k));
                    }
                }
                Op::Gelu(x) => {
                    let c = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, &xv)| gv * gelu_derivative(xv))
                        .collect();
                    add_into(&mut grads[x.0], c);
                }
                Op::Softmax(x) => {
                    let (rows, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let mut c = vec![0.0; y.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in span {
                            c[j] = y[j] * (g[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], c);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = node.value.rows_cols();
                    let gd = val(*gain).data();
                    if needs(*gain) {
                        let mut c = vec![0.0; cols];
                        for r in 0..rows {
                            for j in 0..cols {
                                c[j] += g[r * cols + j] * xhat[r * cols + j];
                            }
                        }
                        add_into(&mut grads[gain.0], c);
                    }
                    if needs(*bias) {
                        let mut c = vec![0.0; cols];
                        for chunk in g.chunks(cols) {
                            c.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        add_into(&mut grads[bias.0], c);
                    }
                    if needs(*x) {
                        let mut c = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let off = r * cols;
                            let dxhat: Vec<f64> = (0..cols).map(|j| g[off + j] * gd[j]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                            let mean_dx = dxhat
                                .iter()
                                .zip(&xhat[off..off + cols])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / cols as f64;
                            for j in 0..cols {
                                c[off + j] =
                                    inv_std[r] * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
                            }
                        }
                        add_into(&mut grads[x.0], c);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows_cols().0;
                    let total = node.value.rows_cols().1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).rows_cols().1;
                        if needs(p) {
                            let mut c = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                c.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            add_into(&mut grads[p.0], c);
                        }
                        offset += w;
                    }
                }
                Op::MaskedMeanRows { x, mask, count } => {
                    let cols = node.value.len();
                    let mut c = vec![0.0; mask.len() * cols];
                    let inv = 1.0 / *count as f64;
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        c[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a = b * inv);
                    }
                    add_into(&mut grads[x.0], c);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    let k = 2.0 * g[0] / ta.len() as f64;
                    if needs(*a) {
                        add_into(
                            &mut grads[a.0],
                            ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect(),
                        );
                    }
                    if needs(*b) {
                        add_into(
                            &mut grads[b.0],
                            ta.iter().zip(tb).map(|(x, y)| k * (y - x)).collect(),
                        );
                    }
                }
                Op::CrossEntropy { p, gold, clamped } => {
                    let tp = val(*p).data();
                    let mut c = vec![0.0; tp.len()];
                    if !clamped {
                        c[*gold] = -g[0] / tp[*gold];
                    }
                    add_into(&mut grads[p.0], c);
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    add_into(&mut grads[x.0], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    add_into(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
            }
        }
        out.nodes = grads;
        Ok(out)
    }

    /// Backpropagates from `loss` and adds the result into the gradient
    /// buffers of every given parameter set. Calling it twice without
    /// zeroing accumulates.
    pub fn backward(&self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for set in sets.iter_mut() {
            grads.apply_to(set)?;
        }
        Ok(grads)
    }
}
