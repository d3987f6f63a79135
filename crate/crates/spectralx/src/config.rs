//! Line-oriented `key = value` configuration with `[section]` prefixes.
//!
//! ```text
//! [run]
//! seed = 3
//! [ablation]
//! are = false
//! ```
//!
//! Keys are addressed as `section.key`. Later sources win: file, then the
//! `SPECTRALX_SEED` environment variable, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use spectralx_core::dataio::{DomainShift, SceneConfig, ShiftKind};
use spectralx_core::pipeline::{Baseline, RunConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "SPECTRALX_SEED";

/// Synthetic benchmark sizes and the target-domain shift.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub source_test_scenes: usize,
    pub target_scenes: usize,
    pub blobs: usize,
    pub shift: ShiftKind,
    pub magnitude: f64,
    /// Defaults to `run.seed + 100`.
    pub shift_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 64, source_test_scenes: 16, target_scenes: 32, blobs: 5, shift: ShiftKind::Seasonal, magnitude: 0.5, shift_seed: None }
    }
}

impl DataConfig {
    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        let mut c = SceneConfig::desk(seed);
        c.blobs = self.blobs;
        c
    }

    pub fn domain_shift(&self, seed: u64) -> DomainShift {
        DomainShift { kind: self.shift, magnitude: self.magnitude, seed: self.shift_seed.unwrap_or(seed + 100) }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    /// Dataset manifest written by `gen`; scenes are generated in memory
    /// when absent.
    pub dataset: Option<PathBuf>,
    /// Weights for `infer`; defaults to `model.spxc` under the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Stage-1 weights for `train`; defaults to `stage1.spxc` under the
    /// output directory when that file exists.
    pub stage1: Option<PathBuf>,
    /// Externally supplied backbone weights (SPXC).
    pub backbone_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

const KEYS: &[&str] = &[
    "ablation.aomoa",
    "ablation.are",
    "ablation.hypert",
    "ablation.stage1",
    "data.blobs",
    "data.magnitude",
    "data.shift",
    "data.shift_seed",
    "data.source_test_scenes",
    "data.target_scenes",
    "data.train_scenes",
    "paths.backbone_weights",
    "paths.checkpoint",
    "paths.dataset",
    "paths.stage1",
    "run.baseline",
    "run.batch_size",
    "run.lowrank_rank",
    "run.lr",
    "run.profile",
    "run.seed",
    "run.stage1_epochs",
    "run.stage1_lr",
    "run.stage2_epochs",
];

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn shift_name(k: ShiftKind) -> &'static str {
    match k {
        ShiftKind::Regional => "regional",
        ShiftKind::Seasonal => "seasonal",
    }
}

/// Splits a config text into `section.key → value`, rejecting malformed
/// lines and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
        let key = match section.as_str() {
            "" => k.trim().to_string(),
            s => format!("{s}.{}", k.trim()),
        };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(bad(format!("line {}: duplicate key {key}", n + 1)));
        }
    }
    Ok(out)
}

/// `section.key=value` from the command line.
pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| bad(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let r = &mut self.run;
        let d = &mut self.data;
        match key {
            "run.profile" => r.profile = v.to_string(),
            "run.seed" => r.seed = parse_num(key, v)?,
            "run.stage1_epochs" => r.stage1_epochs = parse_num(key, v)?,
            "run.stage2_epochs" => r.stage2_epochs = parse_num(key, v)?,
            "run.batch_size" => r.batch_size = parse_num(key, v)?,
            "run.lr" => r.lr = parse_num(key, v)?,
            "run.stage1_lr" => r.stage1_lr = parse_num(key, v)?,
            "run.lowrank_rank" => r.lowrank_rank = parse_num(key, v)?,
            "run.baseline" => r.baseline = Baseline::parse(v).ok_or_else(|| bad(format!("{key}: unknown baseline {v:?}")))?,
            "ablation.hypert" => r.ablation.hypert = parse_bool(key, v)?,
            "ablation.aomoa" => r.ablation.aomoa = parse_bool(key, v)?,
            "ablation.are" => r.ablation.are = parse_bool(key, v)?,
            "ablation.stage1" => r.ablation.stage1 = parse_bool(key, v)?,
            "data.train_scenes" => d.train_scenes = parse_num(key, v)?,
            "data.source_test_scenes" => d.source_test_scenes = parse_num(key, v)?,
            "data.target_scenes" => d.target_scenes = parse_num(key, v)?,
            "data.blobs" => d.blobs = parse_num(key, v)?,
            "data.magnitude" => d.magnitude = parse_num(key, v)?,
            "data.shift_seed" => d.shift_seed = if v.is_empty() { None } else { Some(parse_num(key, v)?) },
            "data.shift" => {
                d.shift = match v {
                    "regional" => ShiftKind::Regional,
                    "seasonal" => ShiftKind::Seasonal,
                    _ => return Err(bad(format!("{key}: expected regional or seasonal, got {v:?}"))),
                }
            }
            "paths.dataset" => self.paths.dataset = path(v),
            "paths.checkpoint" => self.paths.checkpoint = path(v),
            "paths.stage1" => self.paths.stage1 = path(v),
            "paths.backbone_weights" => self.paths.backbone_weights = path(v),
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then `text`, then the seed variable, then `overrides`.
    pub fn resolve(text: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Config, CliError> {
        let mut c = Config::default();
        if let Some(t) = text {
            for (k, v) in parse_pairs(t)? {
                c.set(&k, &v)?;
            }
        }
        if let Some(s) = env_seed {
            c.set("run.seed", s).map_err(|_| bad(format!("{SEED_ENV}={s:?} is not a seed")))?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, CliError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Config::resolve(text.as_deref(), env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run.validate().map_err(|e| bad(e.to_string()))?;
        let d = &self.data;
        if d.train_scenes < 1 || d.target_scenes < 1 {
            return Err(bad("need at least one training and one target scene"));
        }
        if d.blobs == 0 {
            return Err(bad("data.blobs must be positive"));
        }
        if !(d.magnitude.is_finite() && d.magnitude >= 0.0) {
            return Err(bad("data.magnitude must be a nonnegative number"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.run;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "run.profile" => r.profile.clone(),
            "run.seed" => r.seed.to_string(),
            "run.stage1_epochs" => r.stage1_epochs.to_string(),
            "run.stage2_epochs" => r.stage2_epochs.to_string(),
            "run.batch_size" => r.batch_size.to_string(),
            "run.lr" => format!("{:?}", r.lr),
            "run.stage1_lr" => format!("{:?}", r.stage1_lr),
            "run.lowrank_rank" => r.lowrank_rank.to_string(),
            "run.baseline" => r.baseline.name().to_string(),
            "ablation.hypert" => r.ablation.hypert.to_string(),
            "ablation.aomoa" => r.ablation.aomoa.to_string(),
            "ablation.are" => r.ablation.are.to_string(),
            "ablation.stage1" => r.ablation.stage1.to_string(),
            "data.train_scenes" => d.train_scenes.to_string(),
            "data.source_test_scenes" => d.source_test_scenes.to_string(),
            "data.target_scenes" => d.target_scenes.to_string(),
            "data.blobs" => d.blobs.to_string(),
            "data.magnitude" => format!("{:?}", d.magnitude),
            "data.shift" => shift_name(d.shift).to_string(),
            "data.shift_seed" => d.shift_seed.map(|s| s.to_string()).unwrap_or_default(),
            "paths.dataset" => path(&self.paths.dataset),
            "paths.checkpoint" => path(&self.paths.checkpoint),
            "paths.stage1" => path(&self.paths.stage1),
            "paths.backbone_weights" => path(&self.paths.backbone_weights),
            _ => return None,
        })
    }

    /// Every key in sorted order; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (s, k) = key.split_once('.').expect("dotted key");
            if s != section {
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let _ = writeln!(out, "{k} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_cell(&self, run: RunConfig) -> Config {
        Config { run, ..self.clone() }
    }
}

pub fn keys() -> &'static [&'static str] {
    KEYS
}
