use alloc::collections::BTreeSet;

use crate::numerics::ParamStore;

use super::Stage;

/// Parameter groups, identified by the leading components of a parameter's
/// hierarchical name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    HyperT,
    Encoder,
    EncoderAoMoA,
    AreAdapter,
    LowRank,
    DecoderCore,
    DecoderAoMoA,
    MaskToken,
    PatchHead,
    SegHead,
}

impl Module {
    pub const ALL: [Module; 10] = [
        Module::HyperT,
        Module::Encoder,
        Module::EncoderAoMoA,
        Module::AreAdapter,
        Module::LowRank,
        Module::DecoderCore,
        Module::DecoderAoMoA,
        Module::MaskToken,
        Module::PatchHead,
        Module::SegHead,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Module::HyperT => "hypert.",
            Module::Encoder => "encoder.blocks.",
            Module::EncoderAoMoA => "encoder.aomoa.",
            Module::AreAdapter => "encoder.are.",
            Module::LowRank => "encoder.lowrank.",
            Module::DecoderCore => "decoder.core.",
            Module::DecoderAoMoA => "decoder.aomoa.",
            Module::MaskToken => "decoder.mask_token",
            Module::PatchHead => "decoder.patch_head.",
            Module::SegHead => "head.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::HyperT => "hypert",
            Module::Encoder => "encoder",
            Module::EncoderAoMoA => "encoder_aomoa",
            Module::AreAdapter => "are_adapter",
            Module::LowRank => "lowrank",
            Module::DecoderCore => "decoder",
            Module::DecoderAoMoA => "decoder_aomoa",
            Module::MaskToken => "mask_token",
            Module::PatchHead => "patch_head",
            Module::SegHead => "seg_head",
        }
    }

    pub fn of(param: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| param.starts_with(m.prefix()))
    }

    /// Whether the module takes part in the forward pass of `stage`.
    pub fn used_in(self, stage: Stage) -> bool {
        match self {
            Module::HyperT | Module::Encoder | Module::EncoderAoMoA => true,
            Module::DecoderCore | Module::DecoderAoMoA | Module::MaskToken | Module::PatchHead => stage == Stage::Adapt,
            Module::AreAdapter | Module::LowRank | Module::SegHead => stage != Stage::Adapt,
        }
    }
}

/// The set of trainable modules; every other parameter is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<Module>,
}

impl FreezePolicy {
    pub fn new(trainable: impl IntoIterator<Item = Module>) -> Self {
        Self { trainable: trainable.into_iter().collect() }
    }

    /// Masked-reconstruction stage: tokenizer, both AoMoA sets and the
    /// reconstruction head (mask token, patch projection).
    pub fn stage1(hypert: bool, aomoa: bool) -> Self {
        let mut set = BTreeSet::from([Module::MaskToken, Module::PatchHead]);
        if hypert {
            set.insert(Module::HyperT);
        }
        if aomoa {
            set.extend([Module::EncoderAoMoA, Module::DecoderAoMoA]);
        }
        Self { trainable: set }
    }

    /// Segmentation stage: tokenizer, encoder AoMoA, Are-adapter, head.
    pub fn stage2(hypert: bool, aomoa: bool, are: bool) -> Self {
        let mut set = BTreeSet::from([Module::SegHead]);
        if hypert {
            set.insert(Module::HyperT);
        }
        if aomoa {
            set.insert(Module::EncoderAoMoA);
        }
        if are {
            set.insert(Module::AreAdapter);
        }
        Self { trainable: set }
    }

    pub fn is_trainable(&self, param: &str) -> bool {
        Module::of(param).is_some_and(|m| self.trainable.contains(&m))
    }

    pub fn apply(&self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.frozen = !self.is_trainable(&p.name);
        }
    }
}
