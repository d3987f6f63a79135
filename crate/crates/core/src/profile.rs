//! Model geometry for the two supported scales.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Sentinel-2 band centers (nm) as used by DFC2020 scenes.
pub const DFC2020_WAVELENGTHS: [f64; 13] =
    [443.0, 490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 945.0, 1375.0, 1610.0, 2190.0];

/// Default desk-scale sensor: eight bands spanning visible to SWIR.
pub const DESK_WAVELENGTHS: [f64; 8] = [443.0, 490.0, 560.0, 665.0, 705.0, 842.0, 1610.0, 2190.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerProfile {
    pub image_size: usize,
    pub bands: usize,
    /// Side of the semantic feature grid `s` (`S = s²`).
    pub grid: usize,
    /// Semantic channel count `C`.
    pub channels: usize,
    /// Attribute token count `L` (a perfect square).
    pub tokens: usize,
    /// Half the token width; tokens are `L × 2r`.
    pub half_width: usize,
    pub heads: usize,
    /// Local attention window side.
    pub window: usize,
    /// Output widths of the downsampling stages; the last equals `C`.
    pub cnn_widths: Vec<usize>,
}

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

pub fn isqrt_exact(n: usize) -> Option<usize> {
    let r = libm::round(libm::sqrt(n as f64)) as usize;
    (r * r == n).then_some(r)
}

impl TokenizerProfile {
    pub fn desk() -> Self {
        Self::with_stages(32, 8, 8, 32, 16, 32, 4, 4)
    }

    /// ViT-Large scale: `(S, C, L, 2r) = (784, 512, 196, 1024)`.
    pub fn full(bands: usize) -> Self {
        Self::with_stages(224, bands, 28, 512, 196, 512, 8, 7)
    }

    /// CNN widths double stage by stage and end at `channels`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_stages(image_size: usize, bands: usize, grid: usize, channels: usize, tokens: usize, half_width: usize, heads: usize, window: usize) -> Self {
        let stride = image_size / grid.max(1);
        let stages = if is_pow2(stride) { stride.trailing_zeros() as usize } else { 0 };
        let cnn_widths = (0..stages).map(|i| (channels >> (stages - 1 - i)).max(1)).collect();
        Self { image_size, bands, grid, channels, tokens, half_width, heads, window, cnn_widths }
    }

    pub fn semantic_len(&self) -> usize {
        self.grid * self.grid
    }

    pub fn token_side(&self) -> usize {
        isqrt_exact(self.tokens).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        2 * self.half_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Profile(m));
        if self.bands < 1 {
            return bad("band count must be positive".into());
        }
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return bad(format!("image size {} not divisible by grid {}", self.image_size, self.grid));
        }
        let stride = self.image_size / self.grid;
        if !is_pow2(stride) || stride < 2 {
            return bad(format!("total stride {stride} must be a power of two ≥ 2"));
        }
        if self.cnn_widths.len() != stride.trailing_zeros() as usize || self.cnn_widths.last() != Some(&self.channels) {
            return bad(format!("CNN widths {:?} inconsistent with stride {stride} and C={}", self.cnn_widths, self.channels));
        }
        if isqrt_exact(self.tokens).is_none() {
            return bad(format!("token count {} is not a perfect square", self.tokens));
        }
        if self.grid % self.token_side() != 0 {
            return bad(format!("grid {} not divisible by token side {}", self.grid, self.token_side()));
        }
        if self.window == 0 || self.grid % self.window != 0 {
            return bad(format!("window {} does not divide grid {}", self.window, self.grid));
        }
        if self.channels % 4 != 0 {
            return bad(format!("C={} must be divisible by 4", self.channels));
        }
        if self.semantic_len() % 2 != 0 {
            return bad(format!("S={} must be even", self.semantic_len()));
        }
        for (what, d) in [("C", self.channels), ("S", self.semantic_len()), ("r", self.half_width)] {
            if d % self.heads != 0 {
                return bad(format!("{what}={d} not divisible by {} heads", self.heads));
            }
        }
        if self.half_width % 4 != 0 {
            return bad(format!("r={} must be divisible by 4", self.half_width));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoMoAProfile {
    pub adapters: usize,
    pub top_k: usize,
}

impl Default for AoMoAProfile {
    fn default() -> Self {
        Self { adapters: 4, top_k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneProfile {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based encoder block indices carrying an adapter.
    pub sites: Vec<usize>,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    /// 1-based decoder block indices carrying an adapter.
    pub decoder_sites: Vec<usize>,
    pub mask_ratio: f64,
    pub classes: usize,
    pub head_width: usize,
}

impl BackboneProfile {
    pub fn desk(classes: usize) -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            sites: vec![2, 4],
            decoder_depth: 2,
            decoder_width: 32,
            decoder_heads: 4,
            decoder_sites: vec![1, 2],
            mask_ratio: 0.75,
            classes,
            head_width: 32,
        }
    }

    pub fn full(classes: usize) -> Self {
        Self {
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4,
            sites: vec![6, 12, 18, 24],
            decoder_depth: 4,
            decoder_width: 512,
            decoder_heads: 16,
            decoder_sites: vec![1, 2, 3, 4],
            mask_ratio: 0.75,
            classes,
            head_width: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Profile(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.classes < 2 {
            return bad(format!("class count {} < 2", self.classes));
        }
        if self.sites.iter().any(|&s| s == 0 || s > self.depth) {
            return bad(format!("encoder sites {:?} outside 1..={}", self.sites, self.depth));
        }
        if self.decoder_sites.iter().any(|&s| s == 0 || s > self.decoder_depth) {
            return bad(format!("decoder sites {:?} outside 1..={}", self.decoder_sites, self.decoder_depth));
        }
        if self.width % self.heads != 0 || self.decoder_width % self.decoder_heads != 0 {
            return bad("widths not divisible by head counts".into());
        }
        if self.width % 8 != 0 || self.decoder_width % 8 != 0 {
            return bad("widths must be divisible by 8".into());
        }
        Ok(())
    }
}

/// Complete model geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    pub name: &'static str,
    pub tokenizer: TokenizerProfile,
    pub backbone: BackboneProfile,
    pub aomoa: AoMoAProfile,
    /// Sensor wavelengths the tokenizer is built for.
    pub wavelengths: Vec<f64>,
}

impl ModelProfile {
    pub fn desk() -> Self {
        Self {
            name: "desk",
            tokenizer: TokenizerProfile::desk(),
            backbone: BackboneProfile::desk(4),
            aomoa: AoMoAProfile::default(),
            wavelengths: DESK_WAVELENGTHS.to_vec(),
        }
    }

    pub fn full() -> Self {
        Self {
            name: "full",
            tokenizer: TokenizerProfile::full(DFC2020_WAVELENGTHS.len()),
            backbone: BackboneProfile::full(8),
            aomoa: AoMoAProfile::default(),
            wavelengths: DFC2020_WAVELENGTHS.to_vec(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    /// Pixel side of the patch each token covers.
    pub fn patch_side(&self) -> usize {
        self.tokenizer.image_size / self.tokenizer.token_side().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.backbone.validate()?;
        if self.backbone.width != self.tokenizer.width() {
            return Err(Error::Profile(format!(
                "token width 2r={} differs from backbone width {}",
                self.tokenizer.width(),
                self.backbone.width
            )));
        }
        if self.wavelengths.len() != self.tokenizer.bands {
            return Err(Error::Profile(format!("{} wavelengths for {} bands", self.wavelengths.len(), self.tokenizer.bands)));
        }
        if self.aomoa.top_k == 0 || self.aomoa.top_k > self.aomoa.adapters {
            return Err(Error::Profile(format!("K={} outside 1..={}", self.aomoa.top_k, self.aomoa.adapters)));
        }
        if self.tokenizer.image_size % self.tokenizer.token_side() != 0 {
            return Err(Error::Profile("image size not divisible by token grid".into()));
        }
        Ok(())
    }
}
