use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::block::{lowrank_set, scatter_map, site_name, Block, CORE_STD};
use super::{mask_tokens, masked_patch_loss, MaskSplit, Stage};
use crate::aomoa::{AoMoA, RoutingDecision};
use crate::are_adapter::{AreAdapter, MatchMap};
use crate::error::{Error, Result};
use crate::hypert::{HyperOut, HyperT};
use crate::numerics::nn::{Conv2d, LayerNorm, Linear, LowRank};
use crate::numerics::{sincos_embed_2d, Graph, Init, ParamId, ParamStore, RowMap, Rng, Tensor, Var};
use crate::profile::ModelProfile;

/// Which optional components a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelSpec {
    pub aomoa: bool,
    pub are: bool,
    /// Rank of the attention-projection deltas, when present.
    pub lowrank: Option<usize>,
}

impl ModelSpec {
    pub fn full() -> Self {
        Self { aomoa: true, are: true, lowrank: None }
    }
}

// Stream tags keep each component's initialization independent of which
// other components exist.
const TAG_HYPERT: u64 = 1;
const TAG_ENCODER: u64 = 2;
const TAG_AOMOA: u64 = 3;
const TAG_ARE: u64 = 4;
const TAG_DECODER: u64 = 5;
const TAG_DEC_AOMOA: u64 = 6;
const TAG_HEAD: u64 = 7;
const TAG_LOWRANK: u64 = 8;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub aomoa: Vec<Option<AoMoA>>,
    pub norm: LayerNorm,
    pub patch_head: Linear,
    pe: Tensor,
}

/// Sum-fusion pyramid head: per-site normalized 1×1 projections, a 3×3 fusion
/// convolution with ReLU, a 1×1 classifier and bilinear upsampling.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub norms: Vec<LayerNorm>,
    pub lateral: Vec<Linear>,
    pub fuse: Conv2d,
    pub classifier: Linear,
    pub side: usize,
    pub image_size: usize,
    pub classes: usize,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, profile: &ModelProfile, rng: &mut Rng) -> Self {
        let b = &profile.backbone;
        let width = profile.tokenizer.width();
        let lateral = (0..b.sites.len())
            .map(|i| Linear::scaled(store, &format!("head.lateral.{i}"), width, b.head_width, true, rng))
            .collect();
        let norms = (0..b.sites.len()).map(|i| LayerNorm::new(store, &format!("head.norm.{i}"), width)).collect();
        Self {
            norms,
            lateral,
            fuse: Conv2d::new(store, "head.fuse", b.head_width, b.head_width, 3, 1, 1, true, rng),
            classifier: Linear::scaled(store, "head.classifier", b.head_width, b.classes, true, rng),
            side: profile.tokenizer.token_side(),
            image_size: profile.tokenizer.image_size,
            classes: b.classes,
        }
    }

    /// `sites[i]` is paired with `lateral[i]`; the result is `(H·W) × classes`.
    pub fn forward(&self, g: &mut Graph, sites: &[(usize, Var)]) -> Result<Var> {
        if self.classes < 2 {
            return Err(Error::Profile(format!("segmentation needs ≥ 2 classes, got {}", self.classes)));
        }
        let mut acc: Option<Var> = None;
        for &(i, x) in sites {
            let lin = self.lateral.get(i).ok_or_else(|| Error::Shape(format!("no lateral projection for site {i}")))?;
            let x = self.norms[i].forward(g, x)?;
            let y = lin.forward(g, x)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let x = acc.ok_or_else(|| Error::Shape("segmentation head needs at least one site".into()))?;
        let x = self.fuse.forward(g, x, self.side, self.side)?;
        let x = g.relu(x)?;
        let x = self.classifier.forward(g, x)?;
        let up = RowMap::bilinear(self.side, self.side, self.image_size, self.image_size);
        g.mix_rows(x, Rc::new(up))
    }
}

/// Tokenizer, frozen transformer encoder with adapter sites, MAE decoder and
/// segmentation head, all registered in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub profile: ModelProfile,
    pub spec: ModelSpec,
    pub hypert: HyperT,
    pub blocks: Vec<Block>,
    pub aomoa: Vec<Option<AoMoA>>,
    pub are: Vec<Option<AreAdapter>>,
    pub lowrank: Vec<Option<[LowRank; 4]>>,
    pub decoder: Decoder,
    pub head: SegHead,
    pe: Tensor,
}

/// Encoder outputs: final hidden states plus the hidden state after every
/// adapter site (in site order).
#[derive(Debug, Clone)]
pub struct EncodeOut {
    pub hidden: Var,
    pub sites: Vec<Var>,
    pub routing: Vec<[RoutingDecision; 2]>,
    pub match_maps: Vec<MatchMap>,
}

#[derive(Debug, Clone)]
pub struct SegmentOut {
    pub logits: Var,
    pub tokens: HyperOut,
    pub encoded: EncodeOut,
}

#[derive(Debug, Clone)]
pub struct ReconOut {
    pub pred: Var,
    pub loss: Var,
    pub split: MaskSplit,
}

impl Model {
    pub fn new(store: &mut ParamStore, profile: &ModelProfile, spec: ModelSpec, seed: u64) -> Result<Self> {
        profile.validate()?;
        let tok = &profile.tokenizer;
        let bb = &profile.backbone;
        let width = tok.width();
        let site = |i: usize| bb.sites.contains(&(i + 1));

        let hypert = HyperT::new(store, "hypert", tok, &profile.wavelengths, &mut Rng::derive(seed, TAG_HYPERT))?;

        let mut rng = Rng::derive(seed, TAG_ENCODER);
        let blocks = (0..bb.depth)
            .map(|i| Block::new(store, &site_name("encoder.blocks", i), width, bb.heads, bb.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Rng::derive(seed, TAG_AOMOA);
        let aomoa = (0..bb.depth)
            .map(|i| match spec.aomoa && site(i) {
                true => AoMoA::new(store, &site_name("encoder.aomoa", i), width, profile.aomoa.adapters, profile.aomoa.top_k, &mut rng).map(Some),
                false => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Rng::derive(seed, TAG_ARE);
        let are = (0..bb.depth)
            .map(|i| match spec.are && site(i) {
                true => AreAdapter::new(store, &site_name("encoder.are", i), tok, width, &mut rng).map(Some),
                false => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Rng::derive(seed, TAG_LOWRANK);
        let lowrank = (0..bb.depth)
            .map(|i| spec.lowrank.map(|r| lowrank_set(store, &site_name("encoder.lowrank", i), width, r, &mut rng)))
            .collect();

        let decoder = {
            let mut rng = Rng::derive(seed, TAG_DECODER);
            let dw = bb.decoder_width;
            let embed = Linear::new(store, "decoder.core.embed", width, dw, CORE_STD, true, &mut rng);
            let blocks = (0..bb.decoder_depth)
                .map(|i| Block::new(store, &site_name("decoder.core.blocks", i), dw, bb.decoder_heads, bb.mlp_ratio, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(store, "decoder.core.norm", dw);
            let mask_token = store.add_init("decoder.mask_token", &[1, dw], Init::Normal(CORE_STD), &mut rng);
            let patch = profile.patch_side();
            let patch_head = Linear::scaled(store, "decoder.patch_head", dw, patch * patch * tok.bands, true, &mut rng);
            let mut rng = Rng::derive(seed, TAG_DEC_AOMOA);
            let aomoa = (0..bb.decoder_depth)
                .map(|i| match spec.aomoa && bb.decoder_sites.contains(&(i + 1)) {
                    true => AoMoA::new(store, &site_name("decoder.aomoa", i), dw, profile.aomoa.adapters, profile.aomoa.top_k, &mut rng).map(Some),
                    false => Ok(None),
                })
                .collect::<Result<Vec<_>>>()?;
            Decoder { embed, mask_token, blocks, aomoa, norm, patch_head, pe: sincos_embed_2d(tok.token_side(), dw)? }
        };

        let head = SegHead::new(store, profile, &mut Rng::derive(seed, TAG_HEAD));
        Ok(Self {
            profile: profile.clone(),
            spec,
            hypert,
            blocks,
            aomoa,
            are,
            lowrank,
            decoder,
            head,
            pe: sincos_embed_2d(tok.token_side(), width)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.profile.tokenizer.tokens
    }

    /// `(H·W) × d` matrix of an input image, checked against the profile.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let t = &self.profile.tokenizer;
        if image.shape() != [t.image_size * t.image_size, t.bands] {
            return Err(Error::Profile(format!(
                "model expects {}×{}×{} images, got {:?}",
                t.image_size,
                t.image_size,
                t.bands,
                image.shape()
            )));
        }
        Ok(())
    }

    pub fn tokenize(&self, g: &mut Graph, image: &Tensor) -> Result<HyperOut> {
        self.check_image(image)?;
        let x = g.constant(image);
        self.hypert.forward_graph(g, x)
    }

    /// Runs the encoder on the tokens at `positions` of the token grid.
    /// `sem` carries `(z_spa, z_spe)` and is required from stage 2 on.
    /// With `adapters == false` every adapter is bypassed.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph,
        tokens: Var,
        positions: &[usize],
        stage: Stage,
        sem: Option<(Var, Var)>,
        mut noise: Option<&mut Rng>,
        adapters: bool,
    ) -> Result<EncodeOut> {
        if g.rows(tokens) != positions.len() {
            return Err(Error::Shape(format!("{} tokens for {} positions", g.rows(tokens), positions.len())));
        }
        if stage != Stage::Adapt && sem.is_none() {
            return Err(Error::Stage(format!("stage {} encoding needs semantic features", stage as u8)));
        }
        let pe = crate::numerics::gather(&self.pe, positions)?;
        let pe = g.constant(&pe);
        let mut x = g.add(tokens, pe)?;
        let mut out = EncodeOut { hidden: x, sites: Vec::new(), routing: Vec::new(), match_maps: Vec::new() };
        for (i, block) in self.blocks.iter().enumerate() {
            let aomoa = self.aomoa[i].as_ref().filter(|_| adapters);
            let lowrank = self.lowrank[i].as_ref().filter(|_| adapters && stage != Stage::Adapt);
            let (y, routing) = block.forward(g, x, aomoa, lowrank, noise.as_deref_mut())?;
            x = y;
            out.routing.extend(routing);
            if self.profile.backbone.sites.contains(&(i + 1)) {
                if let (Some(are), Some((z_spa, z_spe)), true, true) = (&self.are[i], sem, adapters, stage != Stage::Adapt) {
                    let a = are.forward(g, x, z_spa, z_spe)?;
                    x = a.out;
                    out.match_maps.push(a.maps);
                }
                out.sites.push(x);
            }
        }
        out.hidden = x;
        Ok(out)
    }

    /// Patch predictions (`L × p²d`) for every grid position from the
    /// encoded visible tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_reconstruct(
        &self,
        g: &mut Graph,
        stage: Stage,
        hidden: Var,
        split: &MaskSplit,
        mut noise: Option<&mut Rng>,
        adapters: bool,
    ) -> Result<Var> {
        if stage != Stage::Adapt {
            return Err(Error::Stage("reconstruction decoding is only defined in stage 1".into()));
        }
        let l = self.tokens();
        let d = &self.decoder;
        let e = d.embed.forward(g, hidden)?;
        let x = g.mix_rows(e, scatter_map(l, &split.visible))?;
        let mt = g.param(d.mask_token);
        let mut entries = vec![Vec::new(); l];
        for &t in &split.masked {
            entries[t].push((0, 1.0));
        }
        let m = g.mix_rows(mt, Rc::new(RowMap { in_rows: 1, entries }))?;
        let x = g.add(x, m)?;
        let pe = g.constant(&d.pe);
        let mut x = g.add(x, pe)?;
        for (i, block) in d.blocks.iter().enumerate() {
            let aomoa = d.aomoa[i].as_ref().filter(|_| adapters);
            x = block.forward(g, x, aomoa, None, noise.as_deref_mut())?.0;
        }
        let x = d.norm.forward(g, x)?;
        d.patch_head.forward(g, x)
    }

    pub fn segment(&self, g: &mut Graph, sites: &[Var]) -> Result<Var> {
        let pairs: Vec<(usize, Var)> = sites.iter().copied().enumerate().collect();
        self.head.forward(g, &pairs)
    }

    /// Stage 2/3 forward: tokenize, encode all tokens, segment.
    pub fn forward_segment(&self, g: &mut Graph, image: &Tensor, stage: Stage, noise: Option<&mut Rng>, adapters: bool) -> Result<SegmentOut> {
        if stage == Stage::Adapt {
            return Err(Error::Stage("segmentation is not part of stage 1".into()));
        }
        let tokens = self.tokenize(g, image)?;
        let positions: Vec<usize> = (0..self.tokens()).collect();
        let encoded = self.encode(g, tokens.t_att, &positions, stage, Some((tokens.z_spa, tokens.z_spe)), noise, adapters)?;
        let logits = self.segment(g, &encoded.sites)?;
        Ok(SegmentOut { logits, tokens, encoded })
    }

    /// Stage 1 forward: tokenize, mask, encode the visible tokens, decode,
    /// and score the masked patches.
    pub fn forward_reconstruct(&self, g: &mut Graph, image: &Tensor, mask_rng: &mut Rng, mut noise: Option<&mut Rng>, adapters: bool) -> Result<ReconOut> {
        let tokens = self.tokenize(g, image)?;
        let split = mask_tokens(self.tokens(), self.profile.backbone.mask_ratio, mask_rng)?;
        let visible = g.gather_rows(tokens.t_att, &split.visible)?;
        let enc = self.encode(g, visible, &split.visible, Stage::Adapt, None, noise.as_deref_mut(), adapters)?;
        let pred = self.decode_reconstruct(g, Stage::Adapt, enc.hidden, &split, noise, adapters)?;
        let t = &self.profile.tokenizer;
        let loss = masked_patch_loss(g, pred, image, t.image_size, self.profile.patch_side(), &split.masked)?;
        Ok(ReconOut { pred, loss, split })
    }
}
