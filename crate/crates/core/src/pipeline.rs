//! Stage orchestration: masked-reconstruction adaptation, segmentation
//! training, inference, the ablation matrix and the low-rank baseline.

use alloc::collections::btree_map::{BTreeMap, Entry};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{FreezePolicy, Model, ModelSpec, Module, Stage};
use crate::dataio::Scene;
use crate::error::{Error, Result};
use crate::image::{SegmentationMap, SpectralImage};
use crate::metrics::{ConfusionMatrix, MeanOver, MetricsReport};
use crate::numerics::nn::apply_buffer_updates;
use crate::numerics::optim::{Adam, CosineSchedule, GradAccum};
use crate::numerics::{argmax, Graph, ParamStore, Rng, Tensor};
use crate::profile::ModelProfile;

const TAG_S1_ORDER: u64 = 0x5100;
const TAG_S1_MASK: u64 = 0x51ff;
const TAG_S1_NOISE: u64 = 0x51fe;
const TAG_S2_ORDER: u64 = 0x5200;
const TAG_S2_NOISE: u64 = 0x52fe;

/// Steps between bitwise checks of the frozen parameters.
pub const FROZEN_CHECK_EVERY: usize = 16;
/// Wavelength tolerance (nm) when matching input bands to the tokenizer.
pub const WAVELENGTH_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    /// SpectralX components as selected by the ablation flags.
    None,
    /// Frozen tokenizer and backbone; only the head trains.
    Freeze,
    /// Tokenizer and backbone fully fine-tuned, no adapters.
    Full,
    /// Rank-r deltas on the attention projections.
    LowRank,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Freeze => "freeze",
            Baseline::Full => "full",
            Baseline::LowRank => "lowrank",
        }
    }

    pub fn parse(s: &str) -> Option<Baseline> {
        [Baseline::None, Baseline::Freeze, Baseline::Full, Baseline::LowRank].into_iter().find(|b| b.name() == s)
    }
}

/// Cumulative component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Ablation {
    pub hypert: bool,
    pub aomoa: bool,
    pub are: bool,
    pub stage1: bool,
}

impl Ablation {
    pub const ROWS: [&'static str; 4] = ["freeze", "+hypert", "+aomoa", "+are"];

    /// Row `i` of the component matrix (0 = nothing, 3 = everything).
    pub fn row(i: usize, stage1: bool) -> Ablation {
        Ablation { hypert: i >= 1, aomoa: i >= 2, are: i >= 3, stage1 }
    }

    pub fn full() -> Ablation {
        Ablation::row(3, true)
    }

    pub fn row_index(&self) -> usize {
        self.hypert as usize + self.aomoa as usize + self.are as usize
    }

    pub fn validate(&self) -> Result<()> {
        if (self.are && !self.aomoa) || (self.aomoa && !self.hypert) {
            return Err(Error::InvalidArgument(format!("ablation flags must be cumulative (are ⇒ aomoa ⇒ hypert): {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Stage-2 learning rate.
    pub lr: f64,
    pub stage1_lr: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub baseline: Baseline,
    pub lowrank_rank: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            stage1_epochs: 30,
            stage2_epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            stage1_lr: 1e-3,
            seed: 0,
            ablation: Ablation::full(),
            baseline: Baseline::None,
            lowrank_rank: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        ModelProfile::by_name(&self.profile).ok_or_else(|| Error::InvalidArgument(format!("unknown profile {:?}", self.profile)))?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for lr in [self.lr, self.stage1_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
            }
        }
        if self.baseline != Baseline::None && (self.ablation.hypert || self.ablation.aomoa || self.ablation.are) {
            return Err(Error::InvalidArgument(format!("baseline {} excludes the SpectralX component flags", self.baseline.name())));
        }
        if self.baseline == Baseline::LowRank && self.lowrank_rank == 0 {
            return Err(Error::InvalidArgument("low-rank baseline needs a positive rank".into()));
        }
        Ok(())
    }

    pub fn model_profile(&self) -> Result<ModelProfile> {
        ModelProfile::by_name(&self.profile).ok_or_else(|| Error::InvalidArgument(format!("unknown profile {:?}", self.profile)))
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            aomoa: self.ablation.aomoa,
            are: self.ablation.are,
            lowrank: (self.baseline == Baseline::LowRank).then_some(self.lowrank_rank),
        }
    }

    /// Whether stage 1 has anything to train that stage 2 keeps.
    pub fn stage1_active(&self) -> bool {
        self.ablation.stage1 && (self.ablation.hypert || self.ablation.aomoa)
    }

    pub fn policy(&self, stage: Stage) -> FreezePolicy {
        let a = self.ablation;
        match (stage, self.baseline) {
            (Stage::Adapt, _) => FreezePolicy::stage1(a.hypert, a.aomoa),
            (_, Baseline::Full) => FreezePolicy::new([Module::HyperT, Module::Encoder, Module::SegHead]),
            (_, Baseline::LowRank) => FreezePolicy::new([Module::LowRank, Module::SegHead]),
            _ => FreezePolicy::stage2(a.hypert, a.aomoa, a.are),
        }
    }

    /// Short human-readable cell label, e.g. `+aomoa/w-stage1`.
    pub fn label(&self) -> String {
        let row = match self.baseline {
            Baseline::None => Ablation::ROWS[self.ablation.row_index()],
            b => b.name(),
        };
        format!("{row}/{}", if self.ablation.stage1 { "w-stage1" } else { "wo-stage1" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: Module,
    pub trainable: usize,
    pub frozen: usize,
}

/// Parameter counts per module for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLedger {
    pub stage: Stage,
    pub modules: Vec<ModuleCount>,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamLedger {
    /// Counts the modules taking part in `stage` under `policy`. Works on
    /// shape-only stores.
    pub fn new(store: &ParamStore, policy: &FreezePolicy, stage: Stage) -> Self {
        let mut counts: BTreeMap<Module, (usize, usize)> = BTreeMap::new();
        for (_, p) in store.iter() {
            let Some(m) = Module::of(&p.name) else { continue };
            if !m.used_in(stage) {
                continue;
            }
            let e = counts.entry(m).or_default();
            if policy.trainable.contains(&m) {
                e.0 += p.numel();
            } else {
                e.1 += p.numel();
            }
        }
        let modules: Vec<ModuleCount> = counts.into_iter().map(|(module, (trainable, frozen))| ModuleCount { module, trainable, frozen }).collect();
        Self {
            stage,
            trainable: modules.iter().map(|m| m.trainable).sum(),
            frozen: modules.iter().map(|m| m.frozen).sum(),
            modules,
        }
    }

    pub fn get(&self, m: Module) -> Option<&ModuleCount> {
        self.modules.iter().find(|c| c.module == m)
    }

    /// Trainable parameters outside the task heads (segmentation head,
    /// mask token, patch projection).
    pub fn adapter_trainable(&self) -> usize {
        self.modules
            .iter()
            .filter(|c| !matches!(c.module, Module::SegHead | Module::MaskToken | Module::PatchHead))
            .map(|c| c.trainable)
            .sum()
    }

    pub fn head_trainable(&self) -> usize {
        self.trainable - self.adapter_trainable()
    }
}

/// Ledger of a configuration without materializing weights.
pub fn ledger(config: &RunConfig, stage: Stage) -> Result<ParamLedger> {
    let mut store = ParamStore::dry();
    Model::new(&mut store, &config.model_profile()?, config.spec(), config.seed)?;
    Ok(ParamLedger::new(&store, &config.policy(stage), stage))
}

/// Model weights plus the structure that reads them.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
}

impl Trained {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &config.model_profile()?, config.spec(), config.seed)?;
        Ok(Self { model, store })
    }

    /// Builds the model and, when given, loads externally supplied backbone
    /// weights (encoder blocks, decoder core, mask token) by name.
    pub fn init(config: &RunConfig, backbone: Option<&ParamStore>) -> Result<Self> {
        let mut state = Self::build(config)?;
        if let Some(b) = backbone {
            state.copy_from(b, is_backbone_param);
        }
        Ok(state)
    }

    /// Copies same-named, same-shaped parameters and buffers selected by
    /// `select` from `other`. Returns the number of tensors copied.
    pub fn copy_from(&mut self, other: &ParamStore, select: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for (_, p) in other.iter().filter(|(_, p)| select(&p.name)) {
            if let Some(id) = self.store.find(&p.name) {
                let q = self.store.get_mut(id);
                if q.shape == p.shape {
                    q.tensor = p.tensor.clone();
                    n += 1;
                }
            }
        }
        for (name, t) in other.buffers().filter(|(name, _)| select(name)) {
            if let Some(id) = self.store.find_buffer(name) {
                let b = self.store.buffer_mut(id);
                if b.shape() == t.shape() {
                    *b = t.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Names of the parameters an external backbone supplies.
pub fn is_backbone_param(name: &str) -> bool {
    matches!(Module::of(name), Some(Module::Encoder | Module::DecoderCore | Module::MaskToken))
}

/// Names of the parameters carried from stage 1 into stage 2.
pub fn carried_from_stage1(name: &str) -> bool {
    matches!(Module::of(name), Some(Module::HyperT | Module::EncoderAoMoA))
}

fn frozen_snapshot(store: &ParamStore) -> Vec<(usize, Tensor)> {
    store.iter().filter(|(_, p)| p.frozen).map(|(id, p)| (id.index(), p.tensor.clone())).collect()
}

fn check_frozen(store: &ParamStore, snapshot: &[(usize, Tensor)]) -> Result<()> {
    for (i, t) in snapshot {
        let p = store.get(crate::numerics::ParamId(*i));
        if p.tensor != *t {
            return Err(Error::Stage(format!("frozen parameter {} changed during training", p.name)));
        }
    }
    Ok(())
}

/// Checks bands, wavelengths and size of an input against the tokenizer.
pub fn check_compatible(model: &Model, image: &SpectralImage) -> Result<()> {
    let t = &model.profile.tokenizer;
    if image.bands() != t.bands {
        return Err(Error::Profile(format!("tokenizer expects {} bands, image has {}", t.bands, image.bands())));
    }
    let wl = &model.profile.wavelengths;
    if let Some((a, b)) = wl.iter().zip(image.wavelengths()).find(|(a, b)| (*a - *b).abs() > WAVELENGTH_TOL) {
        return Err(Error::Profile(format!("band at {b} nm where the tokenizer expects {a} nm")));
    }
    if image.height() != t.image_size {
        return Err(Error::Profile(format!("tokenizer expects {0}×{0} images, got {1}×{1}", t.image_size, image.height())));
    }
    Ok(())
}

fn prepare(model: &Model, scenes: &[Scene]) -> Result<Vec<Tensor>> {
    if scenes.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    scenes
        .iter()
        .map(|s| {
            check_compatible(model, &s.image)?;
            Ok(s.image.as_matrix())
        })
        .collect()
}

fn labels_of(model: &Model, scene: &Scene) -> Result<Vec<usize>> {
    let classes = model.profile.backbone.classes;
    let map = scene.labels.as_ref().ok_or_else(|| Error::Data("training scene without labels".into()))?;
    if map.labels().iter().any(|&l| l as usize >= classes) {
        return Err(Error::Data(format!("label outside [0, {classes})")));
    }
    Ok(map.as_indices())
}

/// Shared epoch loop: shuffled mini-batches, gradient accumulation, Adam
/// with cosine decay and periodic frozen checks. Normalization layers use
/// their running statistics throughout. Returns the mean loss per epoch.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    state: &mut Trained,
    config: &RunConfig,
    n: usize,
    epochs: usize,
    lr: f64,
    order_tag: u64,
    stage: Stage,
    mut loss_fn: impl FnMut(&Model, &mut Graph, usize) -> Result<crate::numerics::Var>,
    mut after_epoch: impl FnMut(&Trained) -> Result<()>,
) -> Result<Vec<f64>> {
    let batch = config.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let schedule = CosineSchedule { base: lr, total: per_epoch * epochs };
    let mut adam = Adam::new(&state.store);
    let snapshot = frozen_snapshot(&state.store);
    let mut losses = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(config.seed, order_tag + epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc = GradAccum::new(&state.store);
            for &i in chunk {
                let (value, updates) = {
                    let mut g = Graph::new(&state.store, false);
                    let loss = loss_fn(&state.model, &mut g, i)?;
                    let value = g.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("stage {} loss {value} at epoch {} step {step}", stage as u8, epoch + 1)));
                    }
                    acc.add(&g.backward(loss)?);
                    (value, core::mem::take(&mut g.buffer_updates))
                };
                apply_buffer_updates(&mut state.store, &updates);
                total += value;
            }
            adam.step(&mut state.store, &acc, schedule.lr(step));
            step += 1;
            if step % FROZEN_CHECK_EVERY == 0 {
                check_frozen(&state.store, &snapshot)?;
            }
        }
        check_frozen(&state.store, &snapshot)?;
        losses.push(total / n as f64);
        after_epoch(state)?;
    }
    Ok(losses)
}

/// Masked-reconstruction adaptation. Applies the stage-1 freeze policy and
/// returns the mean masked-patch loss per epoch.
pub fn run_stage1(config: &RunConfig, state: &mut Trained, train: &[Scene]) -> Result<Vec<f64>> {
    config.validate()?;
    let images = prepare(&state.model, train)?;
    config.policy(Stage::Adapt).apply(&mut state.store);
    let mut mask_rng = Rng::derive(config.seed, TAG_S1_MASK);
    let mut noise = Rng::derive(config.seed, TAG_S1_NOISE);
    train_loop(
        state,
        config,
        images.len(),
        config.stage1_epochs,
        config.stage1_lr,
        TAG_S1_ORDER,
        Stage::Adapt,
        |model, g, i| Ok(model.forward_reconstruct(g, &images[i], &mut mask_rng, Some(&mut noise), true)?.loss),
        |_| Ok(()),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Out {
    pub losses: Vec<f64>,
    /// Validation mIoU after every epoch (empty without a validation set).
    pub val_miou: Vec<f64>,
}

/// Per-pixel cross-entropy training under the stage-2 freeze policy.
pub fn run_stage2(config: &RunConfig, state: &mut Trained, train: &[Scene], val: Option<&[Scene]>) -> Result<Stage2Out> {
    config.validate()?;
    let images = prepare(&state.model, train)?;
    let labels = train.iter().map(|s| labels_of(&state.model, s)).collect::<Result<Vec<_>>>()?;
    config.policy(Stage::Train).apply(&mut state.store);
    let mut noise = Rng::derive(config.seed, TAG_S2_NOISE);
    let mut val_miou = Vec::new();
    let losses = train_loop(
        state,
        config,
        images.len(),
        config.stage2_epochs,
        config.lr,
        TAG_S2_ORDER,
        Stage::Train,
        |model, g, i| {
            let out = model.forward_segment(g, &images[i], Stage::Train, Some(&mut noise), true)?;
            g.cross_entropy(out.logits, &labels[i])
        },
        |state| {
            if let Some(v) = val {
                if let Some(m) = run_stage3(state, v)?.metrics {
                    val_miou.push(m.miou);
                }
            }
            Ok(())
        },
    )?;
    Ok(Stage2Out { losses, val_miou })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Out {
    pub maps: Vec<SegmentationMap>,
    pub confusion: Option<ConfusionMatrix>,
    pub metrics: Option<MetricsReport>,
}

/// Noise-free inference. Metrics are computed when every scene is labeled.
pub fn run_stage3(state: &Trained, scenes: &[Scene]) -> Result<Stage3Out> {
    let model = &state.model;
    let images = prepare(model, scenes)?;
    let classes = model.profile.backbone.classes;
    let size = model.profile.tokenizer.image_size;
    let mut maps = Vec::with_capacity(scenes.len());
    for img in &images {
        let mut g = Graph::new(&state.store, false);
        let out = model.forward_segment(&mut g, img, Stage::Infer, None, true)?;
        let pred: Vec<u16> = argmax(&g.tensor(out.logits), 1)?.into_iter().map(|c| c as u16).collect();
        maps.push(SegmentationMap::new(size, size, classes, pred)?);
    }
    let labeled = scenes.iter().all(|s| s.labels.is_some());
    let (confusion, metrics) = if labeled {
        let mut cm = ConfusionMatrix::new(classes);
        for (s, p) in scenes.iter().zip(&maps) {
            let t = s.labels.as_ref().expect("labeled");
            if t.classes() > classes || t.labels().iter().any(|&l| l as usize >= classes) {
                return Err(Error::Data(format!("ground truth label outside [0, {classes})")));
            }
            cm.accumulate_labels(t.labels(), p.labels())?;
        }
        let report = cm.report(MeanOver::NonzeroUnion)?;
        (Some(cm), Some(report))
    } else {
        (None, None)
    };
    Ok(Stage3Out { maps, confusion, metrics })
}

/// Everything recorded about one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub ledger: ParamLedger,
    pub stage1_ledger: Option<ParamLedger>,
    pub stage1_losses: Vec<f64>,
    pub stage2: Stage2Out,
    /// Held-out source-domain metrics.
    pub source: Option<MetricsReport>,
    /// Target-domain metrics.
    pub target: Option<MetricsReport>,
}

/// Scene sets of one experiment.
#[derive(Debug, Clone, Copy)]
pub struct Datasets<'a> {
    pub train: &'a [Scene],
    pub source_test: Option<&'a [Scene]>,
    pub target_test: &'a [Scene],
}

/// Stage-1 result reusable across configurations with the same
/// stage-1-relevant settings.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub store: ParamStore,
    pub losses: Vec<f64>,
    pub ledger: ParamLedger,
}

pub type Stage1Key = (bool, bool, u64, usize, usize, u64);

pub fn stage1_key(config: &RunConfig) -> Stage1Key {
    let c = config;
    (c.ablation.hypert, c.ablation.aomoa, c.seed, c.stage1_epochs, c.batch_size, c.stage1_lr.to_bits())
}

/// Runs stage 1 when it applies and stage 2/3 on top.
pub fn run_experiment(config: &RunConfig, data: Datasets, backbone: Option<&ParamStore>, stage1: Option<&Stage1Result>) -> Result<(RunReport, Trained)> {
    let mut state = Trained::init(config, backbone)?;
    let (stage1_losses, stage1_ledger) = match (config.stage1_active(), stage1) {
        (false, _) => (Vec::new(), None),
        (true, Some(s)) => {
            state.copy_from(&s.store, carried_from_stage1);
            (s.losses.clone(), Some(s.ledger.clone()))
        }
        (true, None) => {
            let s = stage1_only(config, data.train, backbone)?;
            state.copy_from(&s.store, carried_from_stage1);
            (s.losses, Some(s.ledger))
        }
    };
    let stage2 = run_stage2(config, &mut state, data.train, data.source_test)?;
    let source = match data.source_test {
        Some(s) => run_stage3(&state, s)?.metrics,
        None => None,
    };
    let target = run_stage3(&state, data.target_test)?.metrics;
    let ledger = ParamLedger::new(&state.store, &config.policy(Stage::Train), Stage::Train);
    Ok((RunReport { config: config.clone(), ledger, stage1_ledger, stage1_losses, stage2, source, target }, state))
}

/// Stage 1 on a freshly built model.
pub fn stage1_only(config: &RunConfig, train: &[Scene], backbone: Option<&ParamStore>) -> Result<Stage1Result> {
    let mut state = Trained::init(config, backbone)?;
    let losses = run_stage1(config, &mut state, train)?;
    let ledger = ParamLedger::new(&state.store, &config.policy(Stage::Adapt), Stage::Adapt);
    Ok(Stage1Result { store: state.store, losses, ledger })
}

/// The eight cells: four component rows, each with and without stage 1.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::with_capacity(8);
    for stage1 in [true, false] {
        for row in 0..4 {
            let mut c = base.clone();
            c.ablation = Ablation::row(row, stage1);
            c.baseline = if row == 0 { Baseline::Freeze } else { Baseline::None };
            out.push(c);
        }
    }
    out
}

/// Runs every ablation cell, sharing stage-1 results between cells that
/// only differ in stage-2 components.
pub fn run_ablation(base: &RunConfig, data: Datasets, backbone: Option<&ParamStore>) -> Result<Vec<RunReport>> {
    let mut cache: BTreeMap<Stage1Key, Stage1Result> = BTreeMap::new();
    let mut reports = Vec::with_capacity(8);
    for config in ablation_configs(base) {
        let cached = match config.stage1_active() {
            true => Some(&*match cache.entry(stage1_key(&config)) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(stage1_only(&config, data.train, backbone)?),
            }),
            false => None,
        };
        reports.push(run_experiment(&config, data, backbone, cached)?.0);
    }
    Ok(reports)
}

/// Rank-r attention deltas with everything else frozen but the head.
pub fn lowrank_baseline(config: &RunConfig, train: &[Scene], val: Option<&[Scene]>, backbone: Option<&ParamStore>) -> Result<(Trained, Stage2Out)> {
    let mut c = config.clone();
    c.baseline = Baseline::LowRank;
    c.ablation = Ablation { stage1: false, ..Ablation::default() };
    if c.lowrank_rank == 0 {
        c.lowrank_rank = 4;
    }
    let mut state = Trained::init(&c, backbone)?;
    let out = run_stage2(&c, &mut state, train, val)?;
    Ok((state, out))
}
