//! Hyper tokenizer: spectral image → attribute tokens plus the semantic
//! features they were matched against.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::SpectralImage;
use crate::numerics::nn::{join, window_mask, Attention, BatchNorm, Conv2d, Mlp};
use crate::numerics::{interpolate_linear, sincos_embed_1d, sincos_embed_2d, Graph, Init, ParamId, ParamStore, Rng, Tensor, Var};
use crate::profile::TokenizerProfile;

pub const QUERY_STD: f64 = 0.02;
/// Width of the spatial match locality prior, in token-cell sides.
pub const LOCALITY_SIGMA: f64 = 0.5;

/// Low-level features: `z_spa` is `S×C`, `z_spe` is `C×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatures {
    pub z_spa: Tensor,
    pub z_spe: Tensor,
}

/// `L × 2r` attribute tokens. Columns `[0, r)` are the spatial half,
/// `[r, 2r)` the spectral half.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTokens {
    pub t_att: Tensor,
}

impl AttributeTokens {
    pub fn half_width(&self) -> usize {
        self.t_att.cols() / 2
    }

    pub fn spa_cols(&self) -> core::ops::Range<usize> {
        0..self.half_width()
    }

    pub fn spe_cols(&self) -> core::ops::Range<usize> {
        self.half_width()..self.t_att.cols()
    }

    fn columns(&self, cols: core::ops::Range<usize>) -> Tensor {
        let rows = self.t_att.rows();
        let mut data = Vec::with_capacity(rows * cols.len());
        for i in 0..rows {
            data.extend_from_slice(&self.t_att.row(i)[cols.clone()]);
        }
        Tensor::new(&[rows, cols.len()], data).expect("column slice")
    }

    pub fn t_spa(&self) -> Tensor {
        self.columns(self.spa_cols())
    }

    pub fn t_spe(&self) -> Tensor {
        self.columns(self.spe_cols())
    }
}

/// Sine-cosine embedding of the band wavelengths (`d × dim`) resampled
/// along the band axis to `rows`.
pub fn spectral_pos_embed(wavelengths: &[f64], rows: usize, dim: usize) -> Result<Tensor> {
    if wavelengths.len() < 2 {
        return Err(Error::InvalidArgument(format!("spectral embedding needs ≥ 2 wavelengths, got {}", wavelengths.len())));
    }
    let table = sincos_embed_1d(wavelengths, dim)?;
    interpolate_linear(&table, rows, 0)
}

/// `s² × c` grid embedding (first half from x, second half from y).
pub fn spatial_pos_embed(side: usize, dim: usize) -> Result<Tensor> {
    if side == 0 {
        return Err(Error::InvalidArgument("grid side must be ≥ 1".into()));
    }
    sincos_embed_2d(side, dim)
}

/// `−‖c_t − p_s‖² / (2σ²)` between the centre `c_t` of token `t`'s cell and
/// grid position `p_s`, with `σ = sigma · cell side` (grid units).
pub fn locality_bias(grid: usize, token_side: usize, sigma: f64) -> Tensor {
    let cell = (grid / token_side) as f64;
    let sigma = sigma * cell;
    let mut data = Vec::with_capacity(token_side * token_side * grid * grid);
    for t in 0..token_side * token_side {
        let cy = (t / token_side) as f64 * cell + (cell - 1.0) / 2.0;
        let cx = (t % token_side) as f64 * cell + (cell - 1.0) / 2.0;
        for s in 0..grid * grid {
            let (dy, dx) = ((s / grid) as f64 - cy, (s % grid) as f64 - cx);
            data.push(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        }
    }
    Tensor::new(&[token_side * token_side, grid * grid], data).expect("sized")
}

/// Graph handles produced by one tokenizer pass.
#[derive(Debug, Clone)]
pub struct HyperOut {
    pub t_att: Var,
    pub z_spa: Var,
    pub z_spe: Var,
    /// Row-stochastic attention maps (local, global, spatial match, spectral match).
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct HyperT {
    pub profile: TokenizerProfile,
    pub stages: Vec<(Conv2d, BatchNorm)>,
    pub local: Attention,
    pub global: Attention,
    pub queries: ParamId,
    pub match_spa: Attention,
    pub match_spe: Attention,
    pub ffn: Mlp,
    pub pe_spa: Tensor,
    pub pe_spe: Tensor,
    /// Fixed distance prior on the spatial match logits (`L × S`).
    pub locality: Tensor,
    window_keep: Rc<Vec<bool>>,
}

impl HyperT {
    pub fn new(store: &mut ParamStore, name: &str, profile: &TokenizerProfile, wavelengths: &[f64], rng: &mut Rng) -> Result<Self> {
        Self::with_kernel(store, name, profile, wavelengths, 3, rng)
    }

    /// `kernel` is the side of every downsampling convolution (odd; 1 gives
    /// a pointwise stack with stride-2 subsampling).
    pub fn with_kernel(store: &mut ParamStore, name: &str, profile: &TokenizerProfile, wavelengths: &[f64], kernel: usize, rng: &mut Rng) -> Result<Self> {
        profile.validate()?;
        if wavelengths.len() != profile.bands {
            return Err(Error::Profile(format!("{} wavelengths for {} bands", wavelengths.len(), profile.bands)));
        }
        let p = profile;
        let (c, s, r) = (p.channels, p.semantic_len(), p.half_width);
        let mut stages = Vec::with_capacity(p.cnn_widths.len());
        let mut c_in = p.bands;
        for (i, &w) in p.cnn_widths.iter().enumerate() {
            let conv = Conv2d::new(store, &join(name, &format!("cnn.{i}.conv")), c_in, w, kernel, 2, kernel / 2, true, rng);
            let bn = BatchNorm::new(store, &join(name, &format!("cnn.{i}.bn")), w);
            stages.push((conv, bn));
            c_in = w;
        }
        let local = Attention::new(store, &join(name, "local"), c, c, c, c, p.heads, None, rng)?;
        let global = Attention::new(store, &join(name, "global"), s, s, s, s, p.heads, None, rng)?;
        let queries = store.add_init(join(name, "queries"), &[p.tokens, 2 * r], Init::Normal(QUERY_STD), rng);
        let match_spa = Attention::new(store, &join(name, "match_spa"), r, c, r, r, p.heads, None, rng)?;
        let match_spe = Attention::new(store, &join(name, "match_spe"), r, s, r, r, p.heads, None, rng)?;
        let ffn = Mlp::new(store, &join(name, "ffn"), (2 * r, 8 * r, 2 * r), None, rng);
        Ok(Self {
            profile: p.clone(),
            stages,
            local,
            global,
            queries,
            match_spa,
            match_spe,
            ffn,
            pe_spa: spatial_pos_embed(p.grid, c)?,
            pe_spe: spectral_pos_embed(wavelengths, c, s)?,
            locality: locality_bias(p.grid, p.token_side(), LOCALITY_SIGMA),
            window_keep: Rc::new(window_mask(p.grid, p.window)),
        })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let p = &self.profile;
        if g.dims(x) != (p.image_size * p.image_size, p.bands) {
            return Err(Error::Profile(format!(
                "tokenizer expects {}×{}×{} input, got {:?}",
                p.image_size,
                p.image_size,
                p.bands,
                g.dims(x)
            )));
        }
        Ok(())
    }

    /// CNN stack; `x` is the `(H·W) × d` image, the result `S × C`.
    pub fn downsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut side = self.profile.image_size;
        let mut h = x;
        for (conv, bn) in &self.stages {
            h = conv.forward(g, h, side, side)?;
            side = conv.out_side(side);
            h = bn.forward(g, h)?;
            h = g.gelu(h)?;
        }
        Ok(h)
    }

    /// Local window attention over grid positions and global attention over
    /// channel maps, each residual. Returns `(z_spa, z_spe, attention maps)`.
    pub fn perceive(&self, g: &mut Graph, f: Var) -> Result<(Var, Var, Vec<Var>)> {
        let local = self.local.forward(g, f, f, Some(&self.window_keep))?;
        let z_spa = g.add(f, local.out)?;
        let ft = g.transpose(f)?;
        let global = self.global.forward(g, ft, ft, None)?;
        let z_spe = g.add(ft, global.out)?;
        let mut maps = local.weights;
        maps.extend(global.weights);
        Ok((z_spa, z_spe, maps))
    }

    /// Cross-attention of the learned queries against position-embedded
    /// semantic features, followed by the feed-forward network.
    pub fn match_tokens(&self, g: &mut Graph, z_spa: Var, z_spe: Var) -> Result<(Var, Vec<Var>)> {
        let r = self.profile.half_width;
        let q = g.param(self.queries);
        let q_spa = g.slice_cols(q, 0, r)?;
        let q_spe = g.slice_cols(q, r, 2 * r)?;
        let pe_spa = g.constant(&self.pe_spa);
        let pe_spe = g.constant(&self.pe_spe);
        let kv_spa = g.add(z_spa, pe_spa)?;
        let kv_spe = g.add(z_spe, pe_spe)?;
        let a_spa = self.match_spa.forward_biased(g, q_spa, kv_spa, &self.locality)?;
        let a_spe = self.match_spe.forward(g, q_spe, kv_spe, None)?;
        let cat = g.concat_cols(&[a_spa.out, a_spe.out])?;
        let t_att = self.ffn.forward(g, cat)?;
        let mut maps = a_spa.weights;
        maps.extend(a_spe.weights);
        Ok((t_att, maps))
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<HyperOut> {
        let f = self.downsample(g, x)?;
        let (z_spa, z_spe, mut attention) = self.perceive(g, f)?;
        let (t_att, maps) = self.match_tokens(g, z_spa, z_spe)?;
        attention.extend(maps);
        Ok(HyperOut { t_att, z_spa, z_spe, attention })
    }

    /// Evaluation-mode tokenization of one image.
    pub fn forward(&self, store: &ParamStore, image: &SpectralImage) -> Result<(AttributeTokens, SemanticFeatures)> {
        if image.wavelengths().len() != self.profile.bands {
            return Err(Error::Profile(format!("image has {} bands, tokenizer expects {}", image.bands(), self.profile.bands)));
        }
        let mut g = Graph::new(store, false);
        let x = g.constant(&image.as_matrix());
        let out = self.forward_graph(&mut g, x)?;
        Ok((
            AttributeTokens { t_att: g.tensor(out.t_att) },
            SemanticFeatures { z_spa: g.tensor(out.z_spa), z_spe: g.tensor(out.z_spe) },
        ))
    }
}
