//! Transformer encoder/decoder hosting the adapters, token masking, the
//! segmentation head and the weight checkpoint container.

mod block;
pub mod checkpoint;
mod model;
mod policy;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

pub use block::{lowrank_set, Block, CORE_STD};
pub use model::{Decoder, EncodeOut, Model, ModelSpec, ReconOut, SegHead, SegmentOut};
pub use policy::{FreezePolicy, Module};

pub const PATCH_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Adapt = 1,
    Train = 2,
    Infer = 3,
}

impl Stage {
    pub fn from_number(n: u8) -> Option<Stage> {
        match n {
            1 => Some(Stage::Adapt),
            2 => Some(Stage::Train),
            3 => Some(Stage::Infer),
            _ => None,
        }
    }
}

/// Visible and masked token indices, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Masks `⌊ratio·L⌋` tokens drawn uniformly without replacement.
pub fn mask_tokens(tokens: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n_mask = libm::floor(ratio * tokens as f64) as usize;
    if n_mask >= tokens {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} leaves no visible token out of {tokens}")));
    }
    let mut order: Vec<usize> = (0..tokens).collect();
    rng.shuffle(&mut order);
    let mut masked = order[..n_mask].to_vec();
    let mut visible = order[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSplit { visible, masked })
}

/// Pixel patch of token `t` (row-major token grid), flattened `[y][x][band]`.
pub fn patch_values(image: &Tensor, image_size: usize, patch: usize, t: usize) -> Vec<f64> {
    let d = image.cols();
    let side = image_size / patch;
    let (ty, tx) = (t / side, t % side);
    let mut out = Vec::with_capacity(patch * patch * d);
    for py in 0..patch {
        let row = (ty * patch + py) * image_size + tx * patch;
        for px in 0..patch {
            out.extend_from_slice(image.row(row + px));
        }
    }
    out
}

/// Patch standardized by its own mean and variance.
pub fn normalized_patch(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + PATCH_NORM_EPS);
    values.iter().map(|v| (v - mean) * inv).collect()
}

/// Mean squared error between predicted and per-patch normalized target
/// patches, over the masked tokens only.
pub fn masked_patch_loss(g: &mut Graph, pred: Var, image: &Tensor, image_size: usize, patch: usize, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::InvalidArgument("reconstruction loss over an empty mask set".into()));
    }
    let mut target = Vec::with_capacity(masked.len() * g.cols(pred));
    for &t in masked {
        target.extend(normalized_patch(&patch_values(image, image_size, patch, t)));
    }
    let p = g.gather_rows(pred, masked)?;
    let cols = g.cols(p);
    let t = g.constant_raw(masked.len(), cols, target)?;
    g.mse(p, t)
}
