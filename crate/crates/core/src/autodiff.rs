//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted. Most operations view a tensor as a matrix
//! with `rows = product of leading dims` and `cols = last dim`.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type usable on a tape.
pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// `C ← α·op(A)·op(B) + β·C` with `op(A)` of shape `m×k` and `op(B)` of shape `k×n`.
    /// `A` is stored `m×k` row-major, or `k×m` when `ta`; likewise for `B`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(ta: bool, tb: bool, m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Strides of op(X) (rows×cols) given X stored row-major.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(ta: bool, tb: bool, m: usize, k: usize, n: usize, alpha: $t, a: &[$t], b: &[$t], beta: $t, c: &mut [$t]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer sizes");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(ta, m, k);
                let (rsb, csb) = strides(tb, k, n);
                // SAFETY: buffer lengths were checked above and strides stay within them.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows in the matrix view.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect() }
    }

    fn add_assign(&mut self, other: &[T]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a = *a + *b;
        }
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Col,
    Row,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Binary(BinOp, Bcast, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Vec<usize>>),
    SelectCols(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Elu(Var),
    LeakyRelu(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout(Var, Vec<T>),
    Mean(Var),
    Sum(Var),
    SumCols(Var),
    L2Norm(Var),
    Cross(Var, Var),
    Mat3Mul(Var, Var, bool, bool),
    Mat3Vec(Var, Var),
    AcosClamped(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bound used by [`Tape::acos_clamped`].
pub const ACOS_CLAMP: f64 = 1e-7;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input; its gradient accumulates across backward calls.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Clears every gradient, leaves included.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, x: Var, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, op, needs)
    }

    /// `[.., k] × [k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.val(a).shape.clone(), self.val(b).shape.clone());
        if bsh.len() != 2 || ash.len() < 2 || *ash.last().unwrap() != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} × {bsh:?}")));
        }
        let (m, k, n) = (self.val(a).rows(), bsh[0], bsh[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), &self.val(a).data, &self.val(b).data, T::zero(), &mut out);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), needs))
    }

    /// Batched `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.val(a).shape.clone(), self.val(b).shape.clone());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape("bmm", format!("{ash:?} × {bsh:?}")));
        }
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (&self.val(a).data, &self.val(b).data);
        for i in 0..bs {
            T::gemm(false, false, m, k, n, T::one(), &ad[i * m * k..], &bd[i * k * n..], T::zero(), &mut out[i * m * n..]);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![bs, m, n], data: out }, Op::Bmm(a, b), needs))
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape == tb.shape {
            return Ok(Bcast::Same);
        }
        if tb.len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if tb.shape.len() == 2 && tb.shape[1] == 1 && tb.shape[0] == ta.rows() {
            return Ok(Bcast::Col);
        }
        if tb.shape.len() == 2 && tb.shape[0] == 1 && tb.shape[1] == ta.cols() {
            return Ok(Bcast::Row);
        }
        Err(Error::shape(op, format!("cannot broadcast {:?} onto {:?}", tb.shape, ta.shape)))
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let kind = self.bcast_kind(name, a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let cols = ta.cols();
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = ta
            .data
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = match kind {
                    Bcast::Same => tb.data[idx],
                    Bcast::Col => tb.data[idx / cols],
                    Bcast::Row => tb.data[idx % cols],
                    Bcast::Scalar => tb.data[0],
                };
                f(x, y)
            })
            .collect();
        let shape = ta.shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Binary(op, kind, a, b), needs))
    }

    /// Elementwise sum; `b` may be same-shaped, `[rows,1]`, `[1,cols]` or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.val(x);
        let data = t.data.iter().map(|&v| v * s).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.val(x);
        let data = t.data.iter().map(|&v| v + s).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::AddScalar(x))
    }

    /// Concatenation of 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} inputs on axis {axis}", xs.len())));
        }
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.val(v).shape.clone()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(Error::shape("concat", format!("inputs must be 2-D, got {shapes:?}")));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(Error::shape("concat", format!("mismatched shapes {shapes:?} on axis {axis}")));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (shape, data) = if axis == 0 {
            let mut data = Vec::with_capacity(total * shapes[0][1]);
            for &v in xs {
                data.extend_from_slice(&self.val(v).data);
            }
            (vec![total, shapes[0][1]], data)
        } else {
            let rows = shapes[0][0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&v, s) in xs.iter().zip(&shapes) {
                    data.extend_from_slice(&self.val(v).data[r * s[1]..(r + 1) * s[1]]);
                }
            }
            (vec![rows, total], data)
        };
        let needs = self.needs(xs);
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), needs))
    }

    /// Gathers rows: `out[r] = x[idx[r]]`.
    pub fn index_select(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("index_select", format!("indices out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let shape = vec![idx.len(), cols];
        Ok(self.unary(x, shape, data, Op::IndexSelect(x, idx)))
    }

    /// Scatter-adds rows: `out[seg[r]] += x[r]` for `segments` output rows.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<Vec<usize>>, segments: usize) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        if seg.len() != rows || segments == 0 || seg.iter().any(|&s| s >= segments) {
            return Err(Error::shape("segment_sum", format!("{} segment ids for {rows} rows into {segments}", seg.len())));
        }
        let mut data = vec![T::zero(); segments * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                data[s * cols + c] = data[s * cols + c] + t.data[r * cols + c];
            }
        }
        Ok(self.unary(x, vec![segments, cols], data, Op::SegmentSum(x, seg)))
    }

    /// Gathers columns of the matrix view.
    pub fn select_cols(&mut self, x: Var, cols_idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        if cols_idx.is_empty() || cols_idx.iter().any(|&c| c >= cols) {
            return Err(Error::shape("select_cols", format!("column indices out of range for {cols} columns")));
        }
        let k = cols_idx.len();
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for &c in cols_idx.iter() {
                data.push(t.data[r * cols + c]);
            }
        }
        Ok(self.unary(x, vec![rows, k], data, Op::SelectCols(x, cols_idx)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} → {shape:?}", t.shape)));
        }
        let data = t.data.clone();
        Ok(self.unary(x, shape.to_vec(), data, Op::Reshape(x)))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let data = t.data.iter().map(|&v| if v > T::zero() { v } else { v.exp_m1() }).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::Elu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.val(x);
        let data = t.data.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::LeakyRelu(x, slope))
    }

    /// Row-wise softmax over the last axis. `mask`, shaped `[m, cols]`, is
    /// added to row `r` as mask row `r % m`; `-inf` entries get zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.cols() != cols || m.shape.len() != 2 {
                return Err(Error::shape("softmax", format!("mask {:?} for {:?}", m.shape, t.shape)));
            }
        }
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                out[c] = match mask {
                    Some(m) => row[c] + m.data[(r % m.rows()) * cols + c],
                    None => row[c],
                };
            }
            let mx = out.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if mx == T::neg_infinity() {
                return Err(Error::shape("softmax", format!("row {r} is fully masked")));
            }
            let mut s = T::zero();
            for v in out.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in out.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = t.shape.clone();
        Ok(self.unary(x, shape, data, Op::Softmax(x)))
    }

    /// Per-row normalization with learned `[1, cols]` gain and bias, epsilon 1e-5.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.val(p).shape != [1, cols] {
                return Err(Error::shape("layernorm", format!("{name} {:?} for {cols} features", self.val(p).shape)));
            }
        }
        let eps = T::c(1e-5);
        let n = T::c(cols as f64);
        let (g, b) = (&self.val(gain).data, &self.val(bias).data);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = t.shape.clone();
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs))
    }

    /// Inverted dropout. Identity when `p == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Var {
        if !training || p <= 0.0 {
            return x;
        }
        let keep = T::c(1.0 / (1.0 - p));
        let t = self.val(x);
        let mask: Vec<T> = (0..t.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let data = t.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::Dropout(x, mask))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data.iter().fold(T::zero(), |a, &v| a + v) / T::c(t.len() as f64);
        self.unary(x, vec![1], vec![s], Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data.iter().fold(T::zero(), |a, &v| a + v);
        self.unary(x, vec![1], vec![s], Op::Sum(x))
    }

    /// Row sums, `[rows, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let cols = t.cols();
        let data: Vec<T> = t.data.chunks(cols).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
        let shape = vec![data.len(), 1];
        self.unary(x, shape, data, Op::SumCols(x))
    }

    /// Row-wise Euclidean norms, `[rows, 1]`.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let cols = t.cols();
        let data: Vec<T> = t.data.chunks(cols).map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()).collect();
        let shape = vec![data.len(), 1];
        self.unary(x, shape, data, Op::L2Norm(x))
    }

    /// Row-wise cross product of `[rows, 3]` tensors.
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape || ta.cols() != 3 {
            return Err(Error::shape("cross", format!("{:?} × {:?}", ta.shape, tb.shape)));
        }
        let mut data = vec![T::zero(); ta.len()];
        for ((o, x), y) in data.chunks_mut(3).zip(ta.data.chunks(3)).zip(tb.data.chunks(3)) {
            o.copy_from_slice(&cross3(x, y));
        }
        let shape = ta.shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Cross(a, b), needs))
    }

    /// Row-wise 3×3 products of `[rows, 9]` row-major matrices, optionally transposed.
    pub fn mat3_mul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (xa, xb) = (self.val(a), self.val(b));
        if xa.shape != xb.shape || xa.cols() != 9 {
            return Err(Error::shape("mat3_mul", format!("{:?} × {:?}", xa.shape, xb.shape)));
        }
        let mut data = vec![T::zero(); xa.len()];
        for ((o, x), y) in data.chunks_mut(9).zip(xa.data.chunks(9)).zip(xb.data.chunks(9)) {
            o.copy_from_slice(&mul3(x, ta, y, tb));
        }
        let shape = xa.shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mat3Mul(a, b, ta, tb), needs))
    }

    /// Row-wise matrix–vector products: `[rows, 9] · [rows, 3] → [rows, 3]`.
    pub fn mat3_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (xm, xv) = (self.val(m), self.val(v));
        if xm.cols() != 9 || xv.cols() != 3 || xm.rows() != xv.rows() {
            return Err(Error::shape("mat3_vec", format!("{:?} · {:?}", xm.shape, xv.shape)));
        }
        let mut data = vec![T::zero(); xv.len()];
        for ((o, a), x) in data.chunks_mut(3).zip(xm.data.chunks(9)).zip(xv.data.chunks(3)) {
            for i in 0..3 {
                o[i] = a[3 * i] * x[0] + a[3 * i + 1] * x[1] + a[3 * i + 2] * x[2];
            }
        }
        let shape = vec![xv.rows(), 3];
        let needs = self.needs(&[m, v]);
        Ok(self.push(Tensor { shape, data }, Op::Mat3Vec(m, v), needs))
    }

    /// `arccos` with the input clamped to `[−1 + 1e-7, 1 − 1e-7]`; the
    /// derivative is evaluated at the clamped value.
    pub fn acos_clamped(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let hi = T::one() - T::c(ACOS_CLAMP);
        let data = t.data.iter().map(|&v| v.max(-hi).min(hi).acos()).collect();
        let shape = t.shape.clone();
        self.unary(x, shape, data, Op::AcosClamped(x))
    }

    /// Propagates gradients from a scalar `loss`. Gradients of leaves
    /// accumulate across calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.val(loss).shape.clone()));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        let seed = Tensor { shape: self.val(loss).shape.clone(), data: vec![T::one()] };
        self.accumulate(loss, seed.data);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.vjp(i, &g.data);
            self.nodes[i].grad = Some(g);
            for (v, d) in contributions {
                if self.nodes[v.0].needs_grad {
                    self.accumulate(v, d);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.add_assign(&d),
            None => node.grad = Some(Tensor { shape: node.value.shape.clone(), data: d }),
        }
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), tb.shape[0], tb.shape[1]);
                let mut res = vec![];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(false, true, m, n, k, T::one(), g, &tb.data, T::zero(), &mut da);
                    res.push((*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(true, false, k, m, n, T::one(), &ta.data, g, T::zero(), &mut db);
                    res.push((*b, db));
                }
                res
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
                let mut da = vec![T::zero(); bs * m * k];
                let mut db = vec![T::zero(); bs * k * n];
                for s in 0..bs {
                    let gs = &g[s * m * n..];
                    T::gemm(false, true, m, n, k, T::one(), gs, &tb.data[s * k * n..], T::zero(), &mut da[s * m * k..]);
                    T::gemm(true, false, k, m, n, T::one(), &ta.data[s * m * k..], gs, T::zero(), &mut db[s * k * n..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Binary(op, kind, a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let cols = ta.cols();
                let bi = |idx: usize| match kind {
                    Bcast::Same => idx,
                    Bcast::Col => idx / cols,
                    Bcast::Row => idx % cols,
                    Bcast::Scalar => 0,
                };
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for idx in 0..ta.len() {
                    let (x, y, gi) = (ta.data[idx], tb.data[bi(idx)], g[idx]);
                    let (ga, gb) = match op {
                        BinOp::Add => (gi, gi),
                        BinOp::Sub => (gi, -gi),
                        BinOp::Mul => (gi * y, gi * x),
                        BinOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    da[idx] = ga;
                    let j = bi(idx);
                    db[j] = db[j] + gb;
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat(xs, axis) => {
                let mut res = Vec::with_capacity(xs.len());
                if *axis == 0 {
                    let mut off = 0;
                    for &v in xs {
                        let n = self.val(v).len();
                        res.push((v, g[off..off + n].to_vec()));
                        off += n;
                    }
                } else {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut off = 0;
                    for &v in xs {
                        let c = self.val(v).cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        res.push((v, d));
                        off += c;
                    }
                }
                res
            }
            Op::IndexSelect(x, idx) => {
                let t = self.val(*x);
                let cols = t.cols();
                let mut d = vec![T::zero(); t.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] = d[src * cols + c] + g[r * cols + c];
                    }
                }
                vec![(*x, d)]
            }
            Op::SegmentSum(x, seg) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(seg.len() * cols);
                for &s in seg.iter() {
                    d.extend_from_slice(&g[s * cols..(s + 1) * cols]);
                }
                vec![(*x, d)]
            }
            Op::SelectCols(x, cidx) => {
                let t = self.val(*x);
                let (rows, cols, k) = (t.rows(), t.cols(), cidx.len());
                let mut d = vec![T::zero(); t.len()];
                for r in 0..rows {
                    for (j, &c) in cidx.iter().enumerate() {
                        d[r * cols + c] = d[r * cols + c] + g[r * k + j];
                    }
                }
                vec![(*x, d)]
            }
            Op::Elu(x) => {
                let t = self.val(*x);
                let d = t.data.iter().zip(&out.data).zip(g).map(|((&v, &y), &gi)| if v > T::zero() { gi } else { gi * (y + T::one()) }).collect();
                vec![(*x, d)]
            }
            Op::LeakyRelu(x, slope) => {
                let t = self.val(*x);
                let d = t.data.iter().zip(g).map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope }).collect();
                vec![(*x, d)]
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let mut d = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(out.data.chunks(cols)).zip(g.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &gi)| a + y * gi);
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, d)]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = out.cols();
                let rows = out.rows();
                let n = T::c(cols as f64);
                let gv = &self.val(*gain).data;
                let mut dx = vec![T::zero(); out.len()];
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        mean_d = mean_d + dh;
                        mean_dh = mean_dh + dh * hr[c];
                        dg[c] = dg[c] + gr[c] * hr[c];
                        db[c] = db[c] + gr[c];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        dx[r * cols + c] = inv_std[r] * (dh - mean_d - hr[c] * mean_dh);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Dropout(x, mask) => vec![(*x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect())],
            Op::Mean(x) => {
                let n = self.val(*x).len();
                vec![(*x, vec![g[0] / T::c(n as f64); n])]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::SumCols(x) => {
                let cols = self.val(*x).cols();
                vec![(*x, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, cols)).collect())]
            }
            Op::L2Norm(x) => {
                let t = self.val(*x);
                let cols = t.cols();
                let mut d = vec![T::zero(); t.len()];
                for (r, (dr, xr)) in d.chunks_mut(cols).zip(t.data.chunks(cols)).enumerate() {
                    let nrm = out.data[r];
                    if nrm > T::zero() {
                        for c in 0..cols {
                            dr[c] = g[r] * xr[c] / nrm;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Cross(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for r in 0..ta.rows() {
                    let s = r * 3..r * 3 + 3;
                    da[s.clone()].copy_from_slice(&cross3(&tb.data[s.clone()], &g[s.clone()]));
                    db[s.clone()].copy_from_slice(&cross3(&g[s.clone()], &ta.data[s]));
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Mat3Mul(a, b, ta, tb) => {
                let (xa, xb) = (self.val(*a), self.val(*b));
                let mut da = vec![T::zero(); xa.len()];
                let mut db = vec![T::zero(); xb.len()];
                for r in 0..xa.rows() {
                    let s = r * 9..r * 9 + 9;
                    let (ma, mb, gr) = (&xa.data[s.clone()], &xb.data[s.clone()], &g[s.clone()]);
                    // C = op(A)·op(B):  d op(A) = G·op(B)ᵀ,  d op(B) = op(A)ᵀ·G.
                    let ga = if *ta { mul3(mb, *tb, gr, true) } else { mul3(gr, false, mb, !*tb) };
                    let gb = if *tb { mul3(gr, true, ma, *ta) } else { mul3(ma, !*ta, gr, false) };
                    da[s.clone()].copy_from_slice(&ga);
                    db[s].copy_from_slice(&gb);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Mat3Vec(m, v) => {
                let (xm, xv) = (self.val(*m), self.val(*v));
                let mut dm = vec![T::zero(); xm.len()];
                let mut dv = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let a = &xm.data[r * 9..r * 9 + 9];
                    let x = &xv.data[r * 3..r * 3 + 3];
                    let gr = &g[r * 3..r * 3 + 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            dm[r * 9 + 3 * i + j] = gr[i] * x[j];
                            dv[r * 3 + j] = dv[r * 3 + j] + a[3 * i + j] * gr[i];
                        }
                    }
                }
                vec![(*m, dm), (*v, dv)]
            }
            Op::AcosClamped(x) => {
                let hi = T::one() - T::c(ACOS_CLAMP);
                let d = self
                    .val(*x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let c = v.max(-hi).min(hi);
                        -gi / (T::one() - c * c).sqrt()
                    })
                    .collect();
                vec![(*x, d)]
            }
        }
    }
}

fn cross3<T: Real>(a: &[T], b: &[T]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn mul3<T: Real>(a: &[T], ta: bool, b: &[T], tb: bool) -> [T; 9] {
    let ea = |i: usize, j: usize| if ta { a[3 * j + i] } else { a[3 * i + j] };
    let eb = |i: usize, j: usize| if tb { b[3 * j + i] } else { b[3 * i + j] };
    let mut o = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            o[3 * i + j] = ea(i, 0) * eb(0, j) + ea(i, 1) * eb(1, j) + ea(i, 2) * eb(2, j);
        }
    }
    o
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Denominator floor of the relative error `|a − n| / max(|a|, |n|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares the tape gradient of a scalar function against central
/// differences with the given step, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarLoss(tape.value(out).shape.clone()));
        }
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradCheckReport { passed: true, max_rel_error: 0.0, worst: None };
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for e in 0..inputs[k].len() {
            let orig = xs[k].data[e];
            xs[k].data[e] = orig + step;
            let fp = eval(&xs)?;
            xs[k].data[e] = orig - step;
            let fm = eval(&xs)?;
            xs[k].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((k, e, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
