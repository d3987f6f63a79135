//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `rows × cols` matrix. Images travel as `(h·w) × channels`
//! and sequences as `len × channels`; convolutions carry their spatial
//! geometry in the op itself.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Error, Result};

/// Stand-in for −∞ in masked logits. Finite so `softmax` never sees `∞ − ∞`.
pub const NEG_SENTINEL: f64 = f64::MIN;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map from input rows to output rows:
/// `out[i] = Σ (j, w) in entries[i]  w · x[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn gather(in_rows: usize, idx: &[usize]) -> Self {
        Self { in_rows, entries: idx.iter().map(|&j| vec![(j, 1.0)]).collect() }
    }

    /// Align-corners linear resampling of `n` rows to `m` rows. Integer
    /// source positions produce a single unit-weight term so that endpoints
    /// (and the identity resampling) are reproduced exactly.
    pub fn linear(n: usize, m: usize) -> Self {
        let entries = (0..m)
            .map(|i| {
                if n == m {
                    return vec![(i, 1.0)];
                }
                let pos = if m == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (m - 1) as f64 };
                let lo = libm::floor(pos) as usize;
                let frac = pos - lo as f64;
                if frac == 0.0 || lo + 1 >= n {
                    vec![(lo.min(n - 1), 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (lo + 1, frac)]
                }
            })
            .collect();
        Self { in_rows: n, entries }
    }

    /// Half-pixel (align-corners off) bilinear resize of an `h×w` grid
    /// flattened row-major to `oh×ow`.
    pub fn bilinear(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let axis = |n: usize, m: usize| -> Vec<Vec<(usize, f64)>> {
            (0..m)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).max(0.0);
                    let lo = (libm::floor(src) as usize).min(n - 1);
                    let hi = (lo + 1).min(n - 1);
                    let frac = src - lo as f64;
                    if hi == lo || frac == 0.0 {
                        vec![(lo, 1.0)]
                    } else {
                        vec![(lo, 1.0 - frac), (hi, frac)]
                    }
                })
                .collect()
        };
        let ys = axis(h, oh);
        let xs = axis(w, ow);
        let mut entries = Vec::with_capacity(oh * ow);
        for y in &ys {
            for x in &xs {
                let mut e = Vec::with_capacity(4);
                for &(yi, wy) in y {
                    for &(xi, wx) in x {
                        e.push((yi * w + xi, wy * wx));
                    }
                }
                entries.push(e);
            }
        }
        Self { in_rows: h * w, entries }
    }

    /// Non-overlapping `f×f` average pooling of an `h×w` grid.
    pub fn avg_pool(h: usize, w: usize, f: usize) -> Self {
        let (oh, ow) = (h / f, w / f);
        let wt = 1.0 / (f * f) as f64;
        let mut entries = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut e = Vec::with_capacity(f * f);
                for dy in 0..f {
                    for dx in 0..f {
                        e.push(((oy * f + dy) * w + ox * f + dx, wt));
                    }
                }
                entries.push(e);
            }
        }
        Self { in_rows: h * w, entries }
    }
}

/// Spatial geometry of a convolution lowered to im2col + matmul.
/// A 1-D convolution is the `w = 1, kw = 1` case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn square(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { h, w, c, kh: k, kw: k, stride, pad_h: pad, pad_w: pad }
    }

    pub fn seq(len: usize, c: usize, k: usize, pad: usize) -> Self {
        Self { h: len, w: 1, c, kh: k, kw: 1, stride: 1, pad_h: pad, pad_w: 0 }
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Calls `f(out_row, col_offset, in_row)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = oy * ow + ox;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let irow = iy as usize * self.w + ix as usize;
                        f(orow, (ky * self.kw + kx) * self.c, irow);
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Gelu(usize),
    Relu(usize),
    Softplus(usize),
    Softmax(usize),
    Mask(usize, Rc<Vec<bool>>),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Im2Col(usize, ConvGeom),
    MixRows(usize, Rc<RowMap>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass. Borrows the parameter store immutably; parameter
/// values are read in place, never copied.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
    pub training: bool,
    pub buffer_updates: Vec<BufferUpdate>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        let n = (*self.param_nodes.get(id.0)?)?;
        self.nodes[n].as_deref()
    }

    /// `(id, grad)` for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.param_nodes.iter().enumerate().filter_map(|(i, n)| {
            let n = (*n)?;
            self.nodes[n].as_deref().map(|g| (ParamId(i), g))
        })
    }
}

fn check_finite(vals: &[f64], what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {what}")))
    }
}

#[inline]
fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn erf_gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise normalization statistics shared by layer and batch norm.
fn normalize(vals: &[f64], n: usize, stride_outer: usize, stride_inner: usize, groups: usize, eps: f64)
    -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)
{
    // groups: number of independent normalizations; each covers n values at
    // positions g*stride_outer + i*stride_inner.
    let mut xhat = vec![0.0; vals.len()];
    let mut inv = vec![0.0; groups];
    let mut means = vec![0.0; groups];
    let mut vars = vec![0.0; groups];
    for g in 0..groups {
        let idx = |i: usize| g * stride_outer + i * stride_inner;
        let mean = (0..n).map(|i| vals[idx(i)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| {
            let d = vals[idx(i)] - mean;
            d * d
        }).sum::<f64>() / n as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        for i in 0..n {
            xhat[idx(i)] = (vals[idx(i)] - mean) * is;
        }
        inv[g] = is;
        means[g] = mean;
        vars[g] = var;
    }
    (xhat, inv, means, vars)
}

fn normalize_backward(
    dy_hat: &[f64],
    xhat: &[f64],
    inv: &[f64],
    n: usize,
    stride_outer: usize,
    stride_inner: usize,
    dx: &mut [f64],
) {
    for (g, &is) in inv.iter().enumerate() {
        let idx = |i: usize| g * stride_outer + i * stride_inner;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..n {
            m1 += dy_hat[idx(i)];
            m2 += dy_hat[idx(i)] * xhat[idx(i)];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        for i in 0..n {
            dx[idx(i)] += is * (dy_hat[idx(i)] - m1 - xhat[idx(i)] * m2);
        }
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        let needs = self.op_needs_grad(&op);
        Ok(self.push(rows, cols, value, op, needs))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |i: &usize| self.nodes[*i].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b)
            | Op::MatMul(a, b) | Op::MatMulNT(a, b) => ng(a) || ng(b),
            Op::Scale(a, _) | Op::Transpose(a) | Op::Gelu(a) | Op::Relu(a) | Op::Softplus(a)
            | Op::Softmax(a) | Op::Mask(a, _) | Op::Im2Col(a, _) | Op::MixRows(a, _)
            | Op::SliceCols(a, _) | Op::SliceRows(a, _) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => ng(a),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                ng(x) || ng(gamma) || ng(beta)
            }
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.iter().any(ng),
            Op::CrossEntropy { logits, .. } => ng(logits),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).tensor.data(),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("node dims consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // ----- leaves -------------------------------------------------------

    /// Non-differentiable input. The tensor is viewed as `rows × cols`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err!("constant {}×{} with {} values", rows, cols, data.len()));
        }
        check_finite(&data, "constant")?;
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Differentiable input whose gradient can be read back with [`Gradients::wrt`].
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Parameter leaf. Requires a gradient unless the parameter is frozen.
    /// Repeated loads of the same parameter share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let p = self.store.get(id);
        let (rows, cols) = (p.tensor.rows(), p.tensor.cols());
        self.nodes.push(Node { rows, cols, value: Value::Param(id), op: Op::Leaf, needs_grad: !p.frozen });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var(n)
    }

    // ----- elementwise --------------------------------------------------

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err!("{what}: {:?} vs {:?}", da, db));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push_checked(r, c, v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push_checked(r, c, v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push_checked(r, c, v, Op::Mul(a.0, b.0), "mul")
    }

    /// `a + b` with the `1 × cols` (or length-`cols`) row `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(b).0 * self.dims(b).1 != c {
            return Err(shape_err!("add_row: {} columns vs row of {}", c, self.dims(b).0 * self.dims(b).1));
        }
        let bv = self.value(b);
        let v = self.value(a).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y)).collect();
        self.push_checked(r, c, v, Op::AddRow(a.0, b.0), "add_row")
    }

    /// `a ⊙ s` with the row `s` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(s).0 * self.dims(s).1 != c {
            return Err(shape_err!("mul_row: {} columns vs row of {}", c, self.dims(s).0 * self.dims(s).1));
        }
        let sv = self.value(s);
        let v = self.value(a).chunks(c).flat_map(|row| row.iter().zip(sv).map(|(x, y)| x * y)).collect();
        self.push_checked(r, c, v, Op::MulRow(a.0, s.0), "mul_row")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push_checked(r, c, v, Op::Scale(a.0, k), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| erf_gelu(x)).collect();
        self.push_checked(r, c, v, Op::Gelu(a.0), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push_checked(r, c, v, Op::Relu(a.0), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push_checked(r, c, v, Op::Softplus(a.0), "softplus")
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err!("matmul: {}×{} · {}×{}", m, k, k2, n));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push_checked(m, n, out, Op::MatMul(a.0, b.0), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err!("matmul_nt: {}×{} · ({}×{})ᵀ", m, k, n, k2));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push_checked(m, n, out, Op::MatMulNT(a.0, b.0), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push_checked(c, r, out, Op::Transpose(a.0), "transpose")
    }

    /// `x · w + b` with `w: in×out` and `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ----- softmax and masking ------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push_checked(r, c, out, Op::Softmax(a.0), "softmax")
    }

    /// Replaces entries whose `keep` flag is false with [`NEG_SENTINEL`].
    pub fn mask_fill(&mut self, a: Var, keep: Rc<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if keep.len() != r * c {
            return Err(shape_err!("mask of {} for {}×{}", keep.len(), r, c));
        }
        let out = self
            .value(a)
            .iter()
            .zip(keep.iter())
            .map(|(&v, &k)| if k { v } else { NEG_SENTINEL })
            .collect();
        self.push_checked(r, c, out, Op::Mask(a.0, keep), "mask_fill")
    }

    /// Keeps the `k` largest entries of each row (ties to the lowest index).
    pub fn top_k_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let keep = top_k_keep(self.value(a), r, c, k)?;
        self.mask_fill(a, Rc::new(keep))
    }

    // ----- normalization ------------------------------------------------

    /// Per-row normalization followed by `gamma`/`beta` (both `1×cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.cols(gamma) * self.rows(gamma) != c || self.cols(beta) * self.rows(beta) != c {
            return Err(shape_err!("layer_norm affine width"));
        }
        let (xhat, inv, _, _) = normalize(self.value(x), c, c, 1, r, LN_EPS);
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat.chunks(c).flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b)).collect();
        self.push_checked(r, c, out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std: inv }, "layer_norm")
    }

    /// Per-column normalization over rows using the statistics of this input
    /// (training mode). Returns the output plus the biased batch mean/variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = self.dims(x);
        if r < 2 {
            return Err(arg_err!("batch norm needs at least 2 rows, got {r}"));
        }
        let (xhat, inv, means, vars) = normalize(self.value(x), r, 1, c, c, BN_EPS);
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat.chunks(c).flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b)).collect();
        let y = self.push_checked(r, c, out, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std: inv }, "batch_norm")?;
        Ok((y, means, vars))
    }

    // ----- convolution --------------------------------------------------

    /// Lowers an `(h·w) × c` map into `(oh·ow) × (kh·kw·c)` patches
    /// ordered `[ky][kx][c]`; zero padding.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != geom.h * geom.w || c != geom.c {
            return Err(shape_err!("im2col: input {}×{} vs geometry {}×{}×{}", r, c, geom.h, geom.w, geom.c));
        }
        if geom.h + 2 * geom.pad_h < geom.kh || geom.w + 2 * geom.pad_w < geom.kw || geom.stride == 0 {
            return Err(shape_err!("im2col: kernel larger than padded input"));
        }
        let (orows, ocols) = (geom.out_h() * geom.out_w(), geom.patch_len());
        let mut out = vec![0.0; orows * ocols];
        let xv = self.value(x);
        geom.for_each_tap(|orow, off, irow| {
            out[orow * ocols + off..orow * ocols + off + geom.c].copy_from_slice(&xv[irow * geom.c..(irow + 1) * geom.c]);
        });
        self.push_checked(orows, ocols, out, Op::Im2Col(x.0, geom), "im2col")
    }

    /// 2-D convolution on an `(h·w) × c_in` map; `weight: (k·k·c_in) × c_out`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let cols = self.im2col(x, geom)?;
        self.linear(cols, weight, bias)
    }

    /// 1-D convolution along the rows of a `len × c_in` sequence.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>, k: usize, pad: usize) -> Result<Var> {
        let (len, c) = self.dims(x);
        self.conv2d(x, weight, bias, ConvGeom::seq(len, c, k, pad))
    }

    // ----- row/column plumbing ------------------------------------------

    pub fn mix_rows(&mut self, x: Var, map: Rc<RowMap>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if map.in_rows != r {
            return Err(shape_err!("mix_rows: map expects {} rows, input has {}", map.in_rows, r));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; map.out_rows() * c];
        for (i, e) in map.entries.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for &(j, w) in e {
                if j >= r {
                    return Err(shape_err!("mix_rows: index {} out of {}", j, r));
                }
                if w == 1.0 && e.len() == 1 {
                    orow.copy_from_slice(&xv[j * c..(j + 1) * c]);
                } else {
                    axpy(w, &xv[j * c..(j + 1) * c], orow);
                }
            }
        }
        let orows = map.out_rows();
        self.push_checked(orows, c, out, Op::MixRows(x.0, map), "mix_rows")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let r = self.rows(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(arg_err!("gather index {} out of {}", bad, r));
        }
        self.mix_rows(x, Rc::new(RowMap::gather(r, idx)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(shape_err!("slice_cols {}..{} of {}", start, end, c));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for row in xv.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push_checked(r, w, out, Op::SliceCols(x.0, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > r {
            return Err(shape_err!("slice_rows {}..{} of {}", start, end, r));
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        self.push_checked(end - start, c, out, Op::SliceRows(x.0, start), "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.rows(p)).ok_or_else(|| arg_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.rows(p) != r) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push_checked(r, total, out, Op::ConcatCols(ids), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.cols(p)).ok_or_else(|| arg_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.cols(p) != c) {
            return Err(shape_err!("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.rows(p);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push_checked(rows, c, out, Op::ConcatRows(ids), "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(shape_err!("reshape {}×{} to {}×{}", r, c, rows, cols));
        }
        let out = self.value(x).to_vec();
        self.push_checked(rows, cols, out, Op::Reshape(x.0), "reshape")
    }

    // ----- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push_checked(1, 1, vec![s], Op::Sum(x.0), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(arg_err!("mean of empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        self.push_checked(1, 1, vec![s], Op::Mean(x.0), "mean")
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(shape_err!("cross_entropy: {} targets for {} rows", targets.len(), r));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!("target class {t} outside [0, {c})")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = libm::exp(v - mx);
                probs[i * c + j] = e;
                s += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= s;
            }
            loss += libm::log(s) + mx - row[targets[i]];
        }
        loss /= r as f64;
        self.push_checked(1, 1, vec![loss], Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    // ----- reverse pass -------------------------------------------------

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(shape_err!("backward from non-scalar {:?}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // Drop gradients of interior nodes that nobody asked for.
        Ok(Gradients { nodes: grads, param_nodes: self.param_nodes.clone() })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[i];
        if !n.needs_grad {
            return None;
        }
        Some(grads[i].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let out = match &node.value {
            Value::Owned(v) => v.as_slice(),
            Value::Param(_) => &[],
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(1.0, g, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    axpy(1.0, g, d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(1.0, g, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    axpy(-1.0, g, d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * bv[k];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        d[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(1.0, g, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        axpy(1.0, row, d);
                    }
                }
            }
            Op::MulRow(a, s) => {
                let (av, sv) = (self.value(Var(*a)), self.value(Var(*s)));
                if let Some(d) = self.acc(grads, *a) {
                    for (k, (dk, gk)) in d.iter_mut().zip(g).enumerate() {
                        *dk += gk * sv[k % c];
                    }
                }
                if let Some(d) = self.acc(grads, *s) {
                    for (k, gk) in g.iter().enumerate() {
                        d[k % c] += gk * av[k];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(*k, g, d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(Var(*a));
                let n = c;
                let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                if let Some(d) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    gemm_nt(g, bv, d, m, n, k);
                }
                if let Some(d) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    gemm_tn(av, g, d, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(Var(*a));
                let n = c;
                let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                if let Some(d) = self.acc(grads, *a) {
                    // dA = G · B
                    gemm_nn(g, bv, d, m, n, k);
                }
                if let Some(d) = self.acc(grads, *b) {
                    // dB = Gᵀ · A
                    gemm_tn(g, av, d, m, n, k);
                }
            }
            Op::Transpose(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    // output is r×c, input c×r
                    for p in 0..r {
                        for q in 0..c {
                            d[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(Var(*a));
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * erf_gelu_grad(av[k]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(Var(*a));
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(Var(*a));
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * sigmoid(av[k]);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for row in 0..r {
                        let y = &out[row * c..(row + 1) * c];
                        let gy = &g[row * c..(row + 1) * c];
                        let s = dot(y, gy);
                        for j in 0..c {
                            d[row * c + j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::Mask(a, keep) => {
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if keep[k] {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(Var(*gamma));
                if let Some(d) = self.acc(grads, *gamma) {
                    for k in 0..g.len() {
                        d[k % c] += g[k] * xhat[k];
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for k in 0..g.len() {
                        d[k % c] += g[k];
                    }
                }
                if self.nodes[*x].needs_grad {
                    let dyh: Vec<f64> = g.iter().enumerate().map(|(k, gk)| gk * gv[k % c]).collect();
                    let d = self.acc(grads, *x).expect("needs grad");
                    normalize_backward(&dyh, xhat, inv_std, c, c, 1, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(Var(*gamma));
                if let Some(d) = self.acc(grads, *gamma) {
                    for k in 0..g.len() {
                        d[k % c] += g[k] * xhat[k];
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for k in 0..g.len() {
                        d[k % c] += g[k];
                    }
                }
                if self.nodes[*x].needs_grad {
                    let dyh: Vec<f64> = g.iter().enumerate().map(|(k, gk)| gk * gv[k % c]).collect();
                    let d = self.acc(grads, *x).expect("needs grad");
                    normalize_backward(&dyh, xhat, inv_std, r, 1, c, d);
                }
            }
            Op::Im2Col(x, geom) => {
                if let Some(d) = self.acc(grads, *x) {
                    let ocols = geom.patch_len();
                    geom.for_each_tap(|orow, off, irow| {
                        axpy(1.0, &g[orow * ocols + off..orow * ocols + off + geom.c], &mut d[irow * geom.c..(irow + 1) * geom.c]);
                    });
                }
            }
            Op::MixRows(x, map) => {
                if let Some(d) = self.acc(grads, *x) {
                    for (o, e) in map.entries.iter().enumerate() {
                        for &(j, w) in e {
                            axpy(w, &g[o * c..(o + 1) * c], &mut d[j * c..(j + 1) * c]);
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let xc = self.cols(Var(*x));
                if let Some(d) = self.acc(grads, *x) {
                    for row in 0..r {
                        axpy(1.0, &g[row * c..(row + 1) * c], &mut d[row * xc + start..row * xc + start + c]);
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(1.0, g, &mut d[start * c..(start + r) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if let Some(d) = self.acc(grads, p) {
                        for row in 0..r {
                            axpy(1.0, &g[row * c + off..row * c + off + pc], &mut d[row * pc..(row + 1) * pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].rows * c;
                    if let Some(d) = self.acc(grads, p) {
                        axpy(1.0, &g[off..off + n], d);
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(1.0, g, d);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let k = g[0] / d.len() as f64;
                    for v in d.iter_mut() {
                        *v += k;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lc = self.nodes[*logits].cols;
                let lr = self.nodes[*logits].rows;
                if let Some(d) = self.acc(grads, *logits) {
                    let k = g[0] / lr as f64;
                    for row in 0..lr {
                        for j in 0..lc {
                            let ind = if targets[row] == j { 1.0 } else { 0.0 };
                            d[row * lc + j] += k * (probs[row * lc + j] - ind);
                        }
                    }
                }
            }
        }
    }
}

/// Keep-flags for the `k` largest entries per row; ties go to the lowest index.
pub fn top_k_keep(vals: &[f64], rows: usize, cols: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > cols {
        return Err(arg_err!("top-k with K={} over {} entries", k, cols));
    }
    let mut keep = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = &vals[i * cols..(i + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // stable sort: equal values keep ascending index order
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap_or(core::cmp::Ordering::Equal));
        for &j in &order[..k] {
            keep[i * cols + j] = true;
        }
    }
    Ok(keep)
}
