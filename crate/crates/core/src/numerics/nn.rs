//! Parameterized layers built on [`Graph`] ops.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use super::{BufferId, BufferUpdate, ConvGeom, Graph, Init, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{shape_err, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add_init(format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std), rng);
        let bias = bias.then(|| store.add_init(format!("{name}.bias"), &[1, fan_out], Init::Zeros, rng));
        Self { weight, bias, fan_in, fan_out }
    }

    /// Fan-in scaled initialization (`std = 1/√fan_in`).
    pub fn scaled(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self::new(store, name, fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64), bias, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut rng = Rng::new(0);
        Self {
            gamma: store.add_init(format!("{name}.gamma"), &[1, dim], Init::Const(1.0), &mut rng),
            beta: store.add_init(format!("{name}.beta"), &[1, dim], Init::Zeros, &mut rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// Per-channel normalization over positions. Training mode uses the
/// statistics of the current input and records a running-average update;
/// evaluation mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut rng = Rng::new(0);
        Self {
            gamma: store.add_init(format!("{name}.gamma"), &[1, dim], Init::Const(1.0), &mut rng),
            beta: store.add_init(format!("{name}.beta"), &[1, dim], Init::Zeros, &mut rng),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[1, dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[1, dim], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        if g.training {
            let (y, mean, var) = g.batch_norm_train(x, ga, be)?;
            g.buffer_updates.push(BufferUpdate { mean_buf: self.running_mean, var_buf: self.running_var, mean, var });
            Ok(y)
        } else {
            let store = g.store();
            let mean = store.buffer(self.running_mean).data();
            let var = store.buffer(self.running_var).data();
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + super::BN_EPS)).collect();
            let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let c = inv.len();
            let inv = g.constant_raw(1, c, inv)?;
            let shift = g.constant_raw(1, c, shift)?;
            let xn = g.mul_row(x, inv)?;
            let xn = g.add_row(xn, shift)?;
            let y = g.mul_row(xn, ga)?;
            g.add_row(y, be)
        }
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: &[BufferUpdate]) {
    for u in updates {
        for (r, b) in store.buffer_mut(u.mean_buf).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.buffer_mut(u.var_buf).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Square-kernel 2-D convolution over `(h·w) × c_in` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut Rng) -> Self {
        let fan_in = k * k * c_in;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let weight = store.add_init(format!("{name}.weight"), &[fan_in, c_out], Init::Normal(std), rng);
        let bias = bias.then(|| store.add_init(format!("{name}.bias"), &[1, c_out], Init::Zeros, rng));
        Self { weight, bias, c_in, c_out, k, stride, pad }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let geom = ConvGeom::square(h, w, self.c_in, self.k, self.stride, self.pad);
        let wt = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, wt, b, geom)
    }
}

/// 1-D convolution along the rows of a `len × c_in` sequence (stride 1).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = k * c_in;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let weight = store.add_init(format!("{name}.weight"), &[fan_in, c_out], Init::Normal(std), rng);
        let bias = Some(store.add_init(format!("{name}.bias"), &[1, c_out], Init::Zeros, rng));
        Self { weight, bias, k, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let wt = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv1d(x, wt, b, self.k, self.pad)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value input widths.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of an attention call plus the per-head weight matrices.
pub struct AttnOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    /// `q_in`/`kv_in`: input widths, `dim`: attention width, `out`: output width.
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, q_in: usize, kv_in: usize, dim: usize, out: usize, heads: usize, std: Option<f64>, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("{name}: attention width {dim} not divisible by {heads} heads"));
        }
        let mk = |store: &mut ParamStore, n: &str, i: usize, o: usize, rng: &mut Rng| match std {
            Some(s) => Linear::new(store, &format!("{name}.{n}"), i, o, s, true, rng),
            None => Linear::scaled(store, &format!("{name}.{n}"), i, o, true, rng),
        };
        Ok(Self {
            q: mk(store, "q", q_in, dim, rng),
            k: mk(store, "k", kv_in, dim, rng),
            v: mk(store, "v", kv_in, dim, rng),
            o: mk(store, "o", dim, out, rng),
            heads,
            dim,
        })
    }

    /// `keep`, when present, is an `Lq × Lk` mask of admissible pairs.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, keep: Option<&Rc<Vec<bool>>>) -> Result<AttnOut> {
        self.forward_adapted(g, xq, xkv, keep, None)
    }

    /// As [`Attention::forward`], with optional low-rank deltas on the
    /// q, k, v and o projections (in that order).
    pub fn forward_adapted(&self, g: &mut Graph, xq: Var, xkv: Var, keep: Option<&Rc<Vec<bool>>>, deltas: Option<&[LowRank; 4]>) -> Result<AttnOut> {
        self.forward_inner(g, xq, xkv, keep, None, deltas)
    }

    /// As [`Attention::forward`], with a fixed `Lq × Lk` additive logit bias
    /// shared by all heads.
    pub fn forward_biased(&self, g: &mut Graph, xq: Var, xkv: Var, bias: &Tensor) -> Result<AttnOut> {
        self.forward_inner(g, xq, xkv, None, Some(bias), None)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        keep: Option<&Rc<Vec<bool>>>,
        bias: Option<&Tensor>,
        deltas: Option<&[LowRank; 4]>,
    ) -> Result<AttnOut> {
        let proj = |g: &mut Graph, lin: &Linear, i: usize, x: Var| -> Result<Var> {
            let y = lin.forward(g, x)?;
            match deltas {
                Some(d) => {
                    let dy = d[i].forward(g, x)?;
                    g.add(y, dy)
                }
                None => Ok(y),
            }
        };
        let q = proj(g, &self.q, 0, xq)?;
        let k = proj(g, &self.k, 1, xkv)?;
        let v = proj(g, &self.v, 2, xkv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let bias = bias.map(|b| g.constant(b));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, (h + 1) * dh)?, g.slice_cols(k, h * dh, (h + 1) * dh)?, g.slice_cols(v, h * dh, (h + 1) * dh)?)
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let s = match bias {
                Some(b) => g.add(s, b)?,
                None => s,
            };
            let s = match keep {
                Some(m) => g.mask_fill(s, m.clone())?,
                None => s,
            };
            let a = g.softmax(s)?;
            weights.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let out = proj(g, &self.o, 3, cat)?;
        Ok(AttnOut { out, weights })
    }
}

/// Additive low-rank update `x·A·B` of a `fan_in × fan_out` weight. `B`
/// starts at zero so the wrapped projection is initially unchanged.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl LowRank {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rank: usize, rng: &mut Rng) -> Self {
        let a = store.add_init(format!("{name}.a"), &[fan_in, rank], Init::Normal(1.0 / libm::sqrt(fan_in as f64)), rng);
        let b = store.add_init(format!("{name}.b"), &[rank, fan_out], Init::Zeros, rng);
        Self { a, b, rank }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.a), g.param(self.b));
        let h = g.matmul(x, a)?;
        g.matmul(h, b)
    }
}

/// Keep-mask restricting attention to non-overlapping `win×win` windows of an
/// `side×side` grid flattened row-major.
pub fn window_mask(side: usize, win: usize) -> Vec<bool> {
    let n = side * side;
    let cell = |i: usize| ((i / side) / win, (i % side) / win);
    let mut keep = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            keep.push(cell(i) == cell(j));
        }
    }
    keep
}

/// Two-layer perceptron `in → hidden → out` with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), std: Option<f64>, rng: &mut Rng) -> Self {
        let (i, h, o) = dims;
        let (fc1, fc2) = match std {
            Some(s) => (
                Linear::new(store, &format!("{name}.fc1"), i, h, s, true, rng),
                Linear::new(store, &format!("{name}.fc2"), h, o, s, true, rng),
            ),
            None => (
                Linear::scaled(store, &format!("{name}.fc1"), i, h, true, rng),
                Linear::scaled(store, &format!("{name}.fc2"), h, o, true, rng),
            ),
        };
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Hierarchical name helper: `join("a.b", "c") == "a.b.c"`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
