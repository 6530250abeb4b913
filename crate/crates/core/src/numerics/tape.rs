//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] owns every intermediate produced during one forward pass. Each
//! operation appends a record whose inputs are strictly earlier records, so a
//! single reverse sweep visits the records in a valid order.

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` marks an input that does not receive a gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Gather { x: Var, index: Vec<usize> },
    LogFloor { x: Var, floor: f64 },
    Pow { x: Var, exponent: f64 },
    Sum(Var),
    SquaredNorm(Var),
    Norm(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::LogFloor { .. } => "log",
            Op::Pow { .. } => "pow",
            Op::Sum(_) => "sum",
            Op::SquaredNorm(_) => "squared_norm",
            Op::Norm(_) => "norm",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Record {
    value: Tensor,
    op: Op,
}

/// Variance floor added inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.records.push(Record { value, op });
        Ok(Var(self.records.len() - 1))
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("cannot broadcast {:?} onto {:?}", r.shape(), x.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_cols(&tensors)?;
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_rows(&tensors)?;
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, t.rows()),
            ));
        }
        let cols = t.cols();
        let value =
            Tensor::from_vec(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, t.cols()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(t.rows(), len, data)?;
        self.push(value, Op::SliceCols { x, start })
    }

    /// Per-row normalisation to zero mean and unit variance followed by the
    /// affine map `gain * x + bias`. `gain` and `bias` are `1 x d` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = t.cols();
        if d == 0 || g.shape() != [1, d] || b.shape() != [1, d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    t.shape(),
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let mut normalized = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = normalized.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let mut value = normalized.clone();
        for r in 0..value.rows() {
            for ((v, gv), bv) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Picks `x[i, index[i]]` for every row, giving an `n x 1` column.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if index.len() != t.rows() || index.iter().any(|&c| c >= t.cols()) {
            return Err(Error::shape(
                "gather",
                format!("{} indices into {:?}", index.len(), t.shape()),
            ));
        }
        let data = index.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let value = Tensor::from_vec(index.len(), 1, data)?;
        self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Natural log of `max(x, floor)`; entries at or below the floor receive
    /// no gradient.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LogFloor { x, floor })
    }

    /// Elementwise power for non-negative inputs.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0).powf(exponent));
        self.push(value, Op::Pow { x, exponent })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).squared_norm());
        self.push(value, Op::SquaredNorm(x))
    }

    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).squared_norm().sqrt());
        self.push(value, Op::Norm(x))
    }

    /// Sums a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all needs at least one term".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Inverted dropout. In training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape();
        let mask: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.leaf(Tensor::from_vec(shape[0], shape[1], mask)?)?;
        self.mul(x, mask)
    }

    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        if inputs.iter().any(|v| v.0 >= self.records.len()) {
            return Err(Error::InvalidArgument(format!(
                "custom op {} references an unknown input",
                op.name()
            )));
        }
        self.push(value, Op::Custom { inputs, op })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rec = &self.records[i];
            if matches!(rec.op, Op::Leaf) {
                // Leaves keep their gradient for the caller.
                grads[i] = Some(g);
                continue;
            }
            match &rec.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut da, 0.0);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut db, 0.0);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Affine { x, scale } => {
                    accumulate(&mut grads, *x, g.scale(*scale));
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&rec.value, |d, y| d * (1.0 - y * y))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&rec.value, |d, y| d * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &rec.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), width);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[start..start + width]);
                        }
                        start += width;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    let cols = g.cols();
                    for &p in parts {
                        let height = self.value(p).rows();
                        let dp = Tensor::from_vec(
                            height,
                            cols,
                            g.data()[start * cols..(start + height) * cols].to_vec(),
                        )?;
                        start += height;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    dx.data_mut()[start * cols..(start + g.rows()) * cols]
                        .copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = normalized.cols() as f64;
                    let mut dx = Tensor::zeros(normalized.rows(), normalized.cols());
                    let mut dgain = Tensor::zeros(1, normalized.cols());
                    let mut dbias = Tensor::zeros(1, normalized.cols());
                    for r in 0..normalized.rows() {
                        let xhat = normalized.row(r);
                        let dy = g.row(r);
                        let dxhat: Vec<f64> = dy.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        }
                        for c in 0..xhat.len() {
                            dgain.data_mut()[c] += dy[c] * xhat[c];
                            dbias.data_mut()[c] += dy[c];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Gather { x, index } => {
                    let src = self.value(*x);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for (r, &c) in index.iter().enumerate() {
                        dx.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogFloor { x, floor } => {
                    let dx = g.zip_map(self.value(*x), |d, v| if v > *floor { d / v } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Pow { x, exponent } => {
                    let p = *exponent;
                    let dx = g.zip_map(self.value(*x), |d, v| {
                        if p == 0.0 || v <= 0.0 {
                            0.0
                        } else {
                            d * p * v.powf(p - 1.0)
                        }
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let s = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(s.rows(), s.cols(), g.get(0, 0)));
                }
                Op::SquaredNorm(x) => {
                    let k = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, *x, self.value(*x).scale(k));
                }
                Op::Norm(x) => {
                    let n = rec.value.get(0, 0);
                    let src = self.value(*x);
                    let dx = if n > 0.0 {
                        src.scale(g.get(0, 0) / n)
                    } else {
                        Tensor::zeros(src.rows(), src.cols())
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&values, &rec.value, &g);
                    for (&v, d) in inputs.iter().zip(dins) {
                        if let Some(d) = d {
                            accumulate(&mut grads, v, d);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros of the right shape when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let s = tape.value(v).shape();
            Tensor::zeros(s[0], s[1])
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts
        .first()
        .map(|t| t.rows())
        .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
    if let Some(bad) = parts.iter().find(|t| t.rows() != rows) {
        return Err(Error::shape(
            "concat_cols",
            format!("row counts differ: {rows} vs {}", bad.rows()),
        ));
    }
    let cols: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
    if let Some(bad) = parts.iter().find(|t| t.cols() != cols) {
        return Err(Error::shape(
            "concat_rows",
            format!("column counts differ: {cols} vs {}", bad.cols()),
        ));
    }
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(rows, cols, data)
}
