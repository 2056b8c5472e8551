//! Dense `f64` tensors and a reverse-mode tape over a fixed set of ops.
//!
//! A [`Graph`] records every op eagerly: values are computed as the op is
//! added, and [`Graph::backward`] replays the tape in reverse. Trainable
//! tensors live in a [`Params`] store; a graph only borrows their values and
//! writes accumulated gradients back into the store.
//!
//! Row semantics: every op that talks about rows treats the last dimension
//! as columns and folds all leading dimensions into rows, so a 1-D tensor is
//! a single row.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of a 1-D input.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of empty input".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(v))
}

fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Expected position under `softmax(v)`: `Σ i·softmax(v)_i`.
pub fn soft_argmax(v: &[f64]) -> Result<f64> {
    let p = softmax(v)?;
    Ok(p.iter().enumerate().map(|(i, p)| i as f64 * p).sum())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without cancellation for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `C (m×n) = beta·C + op(A) (m×k) · op(B) (k×n)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the slices cover exactly the extents described by the strides,
    // checked by the debug assertions above and by every caller's shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Simultaneous mutable access to a value and its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows { x: Var, rstd: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Pick { x: Var, at: Vec<(usize, usize)> },
    Sum(Var),
    SoftArgmax { x: Var, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id), true)
    }

    /// A parameter read as a constant: no gradient flows back to it.
    pub fn frozen(&mut self, params: &Params, id: ParamId) -> Var {
        self.constant(params.value(id).clone())
    }

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (k2, n) = self.mat_dims(b)?;
        if k != k2 {
            return Err(Error::Contract(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (n, k2) = self.mat_dims(b)?;
        if k != k2 {
            return Err(Error::Contract(format!("matmul_t inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_check(&self, x: Var, row: Var) -> Result<usize> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(Error::Contract(format!(
                "row operand has {} elements, rows have {c}",
                self.value(row).numel()
            )));
        }
        Ok(c)
    }

    /// Adds `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data.chunks_mut(c) {
            chunk.iter_mut().zip(&r).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x` elementwise by `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data.chunks_mut(c) {
            chunk.iter_mut().zip(&r).for_each(|(v, b)| *v *= b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::MulRow(x, row), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        for chunk in t.data.chunks_mut(c) {
            let s = softmax_unchecked(chunk);
            chunk.copy_from_slice(&s);
        }
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    /// Per-row `log Σ_j e^{x[j]}`, shape `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let out: Vec<f64> = t.data().chunks(c).map(log_sum_exp).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::LogSumExpRows(x), rg)
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        let mut rstd = Vec::with_capacity(t.rows());
        for chunk in t.data.chunks_mut(c) {
            let mean = chunk.iter().sum::<f64>() / c as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(t, Op::LayerNormRows { x, rstd }, rg)
    }

    /// Row lookup; an embedding when `x` is a table parameter.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Contract(format!("row {r} out of {n}")));
            }
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(x);
        let t = Tensor::matrix(rows.len(), c, out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > t.rows() {
            return Err(Error::Contract(format!(
                "rows {start}..{} out of {}",
                start + len,
                t.rows()
            )));
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(Error::Contract(format!(
                "cols {start}..{} out of {c}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::Contract("concat of nothing".into())),
        };
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(Error::Contract("concat row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Selects `x[row, col]` for each pair, shape `[n]`.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::Contract(format!("pick ({i},{j}) out of {r}x{c}")));
            }
            out.push(t.data()[i * c + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::Pick { x, at: at.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Differentiable `Σ i·softmax(x)_i` over the flattened input.
    pub fn soft_argmax(&mut self, x: Var) -> Result<Var> {
        let probs = softmax(self.value(x).data())?;
        let s = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::SoftArgmax { x, probs }, rg))
    }

    /// Reverse pass from a scalar `loss`, accumulating into `params` grads.
    pub fn backward(&self, loss: Var, params: &mut Params) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let (_, pg) = (&params.values[id.0], &mut params.grads[id.0]);
                    pg.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[1];
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, self.value(*b).data(), true, ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm(k, m, n, self.value(*a).data(), true, &g, false, gb, 1.0);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[0];
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, self.value(*b).data(), false, ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, n * k);
                        gemm(n, m, k, &g, true, self.value(*a).data(), false, gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |_, gi| gi);
                    self.acc_map(&mut grads, *b, &g, |_, gi| gi);
                }
                Op::Sub(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |_, gi| gi);
                    self.acc_map(&mut grads, *b, &g, |_, gi| -gi);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |i, gi| gi * vb[i]);
                    self.acc_map(&mut grads, *b, &g, |i, gi| gi * va[i]);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |i, gi| gi / vb[i]);
                    self.acc_map(&mut grads, *b, &g, |i, gi| -gi * va[i] / (vb[i] * vb[i]));
                }
                Op::AddRow(x, row) => {
                    let c = out.cols();
                    self.acc_map(&mut grads, *x, &g, |_, gi| gi);
                    if self.rg(*row) {
                        let gr = acc(&mut grads, *row, c);
                        for chunk in g.chunks(c) {
                            gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::MulRow(x, row) => {
                    let c = out.cols();
                    let vr = self.value(*row).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * vr[i % c]);
                    if self.rg(*row) {
                        let vx = self.value(*x).data();
                        let gr = acc(&mut grads, *row, c);
                        for (i, gi) in g.iter().enumerate() {
                            gr[i % c] += gi * vx[i];
                        }
                    }
                }
                Op::Scale(x, c) => self.acc_map(&mut grads, *x, &g, |_, gi| gi * c),
                Op::AddScalar(x) => self.acc_map(&mut grads, *x, &g, |_, gi| gi),
                Op::Sigmoid(x) => {
                    let y = out.data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * y[i] * (1.0 - y[i]));
                }
                Op::LogSigmoid(x) => {
                    let vx = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * sigmoid(-vx[i]));
                }
                Op::Tanh(x) => {
                    let y = out.data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * (1.0 - y[i] * y[i]));
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * gelu_grad(vx[i]));
                }
                Op::Exp(x) => {
                    let y = out.data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi * y[i]);
                }
                Op::Log(x) => {
                    let vx = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| gi / vx[i]);
                }
                Op::Square(x) => {
                    let vx = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |i, gi| 2.0 * gi * vx[i]);
                }
                Op::SoftmaxRows(x) => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc_map(&mut grads, *x, &dx, |_, d| d);
                }
                Op::LogSumExpRows(x) => {
                    let t = self.value(*x);
                    let c = t.cols();
                    let mut dx = Vec::with_capacity(t.numel());
                    for (row, gr) in t.data().chunks(c).zip(&g) {
                        dx.extend(softmax_unchecked(row).into_iter().map(|p| p * gr));
                    }
                    self.acc_map(&mut grads, *x, &dx, |_, d| d);
                }
                Op::LayerNormRows { x, rstd } => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((dr, yr), gr)) in dx
                        .chunks_mut(c)
                        .zip(y.chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    self.acc_map(&mut grads, *x, &dx, |_, d| d);
                }
                Op::GatherRows { x, rows } => {
                    if self.rg(*x) {
                        let c = out.cols();
                        let n = self.value(*x).numel();
                        let gx = acc(&mut grads, *x, n);
                        for (i, &r) in rows.iter().enumerate() {
                            let dst = &mut gx[r * c..(r + 1) * c];
                            dst.iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.rg(*x) {
                        let c = out.cols();
                        let n = self.value(*x).numel();
                        let gx = acc(&mut grads, *x, n);
                        gx[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.rg(*x) {
                        let len = out.cols();
                        let c = self.value(*x).cols();
                        let n = self.value(*x).numel();
                        let gx = acc(&mut grads, *x, n);
                        for (i, gr) in g.chunks(len).enumerate() {
                            gx[i * c + start..i * c + start + len]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        if self.rg(*p) {
                            let n = self.value(*p).numel();
                            let gp = acc(&mut grads, *p, n);
                            for (i, dst) in gp.chunks_mut(c).enumerate() {
                                dst.iter_mut()
                                    .zip(&g[i * total + off..i * total + off + c])
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                        off += c;
                    }
                }
                Op::Pick { x, at } => {
                    if self.rg(*x) {
                        let c = self.value(*x).cols();
                        let n = self.value(*x).numel();
                        let gx = acc(&mut grads, *x, n);
                        for (&(i, j), gi) in at.iter().zip(&g) {
                            gx[i * c + j] += gi;
                        }
                    }
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    self.acc_map_n(&mut grads, *x, |_| g0);
                }
                Op::SoftArgmax { x, probs } => {
                    let g0 = g[0];
                    let s = out.item();
                    self.acc_map_n(&mut grads, *x, |j| g0 * probs[j] * (j as f64 - s));
                }
            }
        }
        Ok(())
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.rg(x) {
            return;
        }
        let gx = acc(grads, x, g.len());
        for (i, (a, gi)) in gx.iter_mut().zip(g).enumerate() {
            *a += f(i, *gi);
        }
    }

    fn acc_map_n(&self, grads: &mut [Option<Vec<f64>>], x: Var, f: impl Fn(usize) -> f64) {
        if !self.rg(x) {
            return;
        }
        let n = self.value(x).numel();
        let gx = acc(grads, x, n);
        for (i, a) in gx.iter_mut().enumerate() {
            *a += f(i);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|p| close(*p, 1.0 / 3.0, 1e-15)));

        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(big[0], 1.0, 1e-12) && big[1] < 1e-300 + 1e-12);

        // e^i / (e + e^2 + e^3), evaluated by hand
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!(close(p[0], 1f64.exp() / z, 1e-15));
        assert!(close(p[0], 0.0900, 5e-5));
        assert!(close(p[1], 0.2447, 5e-5));
        assert!(close(p[2], 0.6652, 5e-5));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn soft_argmax_examples() {
        assert!(close(soft_argmax(&[0.0, 100.0, 0.0]).unwrap(), 1.0, 1e-12));
        assert!(close(soft_argmax(&[0.3; 5]).unwrap(), 2.0, 1e-12));
        assert!(close(
            soft_argmax(&[1f64.ln(), 3f64.ln()]).unwrap(),
            0.75,
            1e-15
        ));
        assert!(soft_argmax(&[]).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_p() {
        let mut params = Params::new();
        let id = params.add("p", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut g = Graph::new();
        let p = g.param(&params, id);
        let sq = g.square(p);
        let loss = g.sum(sq);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(id).data(), &[2.0, -4.0, 1.0]);

        // a second pass without reset accumulates
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(id).data(), &[4.0, -8.0, 2.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut params = Params::new();
        let id = params.add("p", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let _p = g.param(&params, id);
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let loss = g.sum(c);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = Params::new();
        let id = params.add("p", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param(&params, id);
        assert!(matches!(
            g.backward(p, &mut params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matmul_matches_naive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        let bt = g.constant(Tensor::matrix(2, 3, vec![7., 9., 11., 8., 10., 12.]).unwrap());
        let c2 = g.matmul_t(a, bt).unwrap();
        assert_eq!(g.value(c2).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).numel(), 6);
    }
}
