//! Differentiable dense-tensor substrate.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod rng;
mod tensor;

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

pub use graph::{top_k_keep, BufferUpdate, ConvGeom, Gradients, Graph, RowMap, Var, BN_EPS, LN_EPS, NEG_SENTINEL};
pub use params::{BufferId, Init, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::{arg_err, shape_err, Result};

fn scratch() -> ParamStore {
    ParamStore::new()
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(shape_err!("matmul expects matrices, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let store = scratch();
    let mut g = Graph::new(&store, false);
    let (x, y) = (g.constant(a), g.constant(b));
    let z = g.matmul(x, y)?;
    Ok(g.tensor(z))
}

fn along_rows<F>(x: &Tensor, axis: usize, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    match (x.shape().len(), axis) {
        (1, 0) => {
            let m = x.clone().reshape(&[1, x.len()])?;
            let y = f(&m)?;
            let n = y.len();
            y.reshape(&[n])
        }
        (2, 1) => f(x),
        (2, 0) => Ok(f(&x.transpose())?.transpose()),
        _ => Err(arg_err!("axis {} invalid for shape {:?}", axis, x.shape())),
    }
}

/// Softmax along `axis` (rank 1 or 2), max-subtracted.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    along_rows(x, axis, |m| {
        let store = scratch();
        let mut g = Graph::new(&store, false);
        let v = g.constant(m);
        let s = g.softmax(v)?;
        Ok(g.tensor(s))
    })
}

/// Replaces all but the `k` largest entries of each last-axis row with
/// [`NEG_SENTINEL`]; ties keep the lowest index.
pub fn top_k_mask(x: &Tensor, k: usize) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let keep = top_k_keep(x.data(), r, c, k)?;
    let data = x.data().iter().zip(&keep).map(|(&v, &kp)| if kp { v } else { NEG_SENTINEL }).collect();
    Tensor::new(x.shape(), data)
}

/// One-dimensional sine-cosine embedding, `positions.len() × dim`, with
/// `[sin(p·ω_i), cos(p·ω_i)]` interleaved for `ω_i = 10000^(−2i/dim)`.
pub fn sincos_embed_1d(positions: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(arg_err!("sine-cosine embedding needs an even dimension, got {dim}"));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(arg_err!("non-finite position"));
    }
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim / 2 {
            let omega = libm::pow(10000.0, -(2.0 * i as f64) / dim as f64);
            data.push(libm::sin(p * omega));
            data.push(libm::cos(p * omega));
        }
    }
    Tensor::new(&[positions.len(), dim], data)
}

/// Linear interpolation along `axis` onto `new_len` uniformly spaced points
/// with both endpoints preserved.
pub fn interpolate_linear(x: &Tensor, new_len: usize, axis: usize) -> Result<Tensor> {
    if new_len < 1 {
        return Err(arg_err!("interpolation target length must be ≥ 1"));
    }
    let len = *x.shape().get(axis).ok_or_else(|| arg_err!("axis {} out of range", axis))?;
    if len < 2 {
        return Err(arg_err!("interpolation needs a source length ≥ 2, got {len}"));
    }
    if len == new_len {
        return Ok(x.clone());
    }
    let m = match (x.shape().len(), axis) {
        (1, 0) => x.clone().reshape(&[len, 1])?,
        (2, 0) => x.clone(),
        (2, 1) => x.transpose(),
        _ => return Err(arg_err!("axis {} invalid for shape {:?}", axis, x.shape())),
    };
    let store = scratch();
    let mut g = Graph::new(&store, false);
    let v = g.constant(&m);
    let y = g.mix_rows(v, Rc::new(RowMap::linear(len, new_len)))?;
    let out = g.tensor(y);
    match (x.shape().len(), axis) {
        (1, _) => out.reshape(&[new_len]),
        (2, 0) => Ok(out),
        _ => Ok(out.transpose()),
    }
}

/// Index of the maximum along `axis` of a matrix (ties → lowest index).
pub fn argmax(x: &Tensor, axis: usize) -> Result<Vec<usize>> {
    let (r, c) = (x.rows(), x.cols());
    let pick = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, v) in vals.enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    match axis {
        1 => Ok((0..r).map(|i| pick(&mut x.row(i).iter().copied())).collect()),
        0 => Ok((0..c).map(|j| pick(&mut (0..r).map(|i| x.at(i, j)))).collect()),
        _ => Err(arg_err!("argmax axis {} on a matrix", axis)),
    }
}

/// Rows of `x` selected by `idx`.
pub fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= x.rows() {
            return Err(arg_err!("gather index {} out of {}", i, x.rows()));
        }
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), c], data)
}

/// Concatenation of matrices along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let store = scratch();
    let mut g = Graph::new(&store, false);
    let vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
    let v = match axis {
        0 => g.concat_rows(&vars)?,
        1 => g.concat_cols(&vars)?,
        _ => return Err(arg_err!("concat axis {axis}")),
    };
    Ok(g.tensor(v))
}

/// i.i.d. standard normal samples scaled by `std`.
pub fn gaussian_sample(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Gaussian error linear unit (erf form).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Two-dimensional sine-cosine table for an `side×side` grid: the first half
/// of each row encodes the column (x) coordinate, the second half the row (y).
pub fn sincos_embed_2d(side: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(arg_err!("2-D sine-cosine embedding needs a dimension divisible by 4, got {dim}"));
    }
    let half = dim / 2;
    let coords: Vec<f64> = (0..side).map(|v| v as f64).collect();
    let table = sincos_embed_1d(&coords, half)?;
    let mut data = vec![0.0; side * side * dim];
    for y in 0..side {
        for x in 0..side {
            let row = &mut data[(y * side + x) * dim..(y * side + x + 1) * dim];
            row[..half].copy_from_slice(table.row(x));
            row[half..].copy_from_slice(table.row(y));
        }
    }
    Tensor::new(&[side * side, dim], data)
}

#[cfg(test)]
mod tests;
