//! Dataset manifests and the synthetic source/target benchmark.
//!
//! A manifest is line-oriented `key = value`:
//!
//! ```text
//! spectralx-dataset = 1
//! classes = 4
//! scene = source train scenes/source-0000.spxr
//! scene = target test scenes/target-0000.spxr
//! ```
//!
//! Scene paths are relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spectralx_core::dataio::{generate_many, split, Scene};

use crate::config::Config;
use crate::error::CliError;
use crate::files;

pub const MANIFEST_NAME: &str = "dataset.txt";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub domain: Domain,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub classes: usize,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("spectralx-dataset = {FORMAT_VERSION}\nclasses = {}\n", self.classes);
        for e in &self.entries {
            let d = match e.domain {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            let s = match e.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let _ = writeln!(out, "scene = {d} {s} {}", e.path.display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest, CliError> {
        let bad = |n: usize, m: &str| CliError::Data(format!("dataset manifest line {}: {m}", n + 1));
        let mut version = None;
        let mut classes = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(n, "expected key = value"))?;
            match k.trim() {
                "spectralx-dataset" => version = Some(v.trim().to_string()),
                "classes" => classes = Some(v.trim().parse::<usize>().map_err(|_| bad(n, "bad class count"))?),
                "scene" => {
                    let mut parts = v.split_whitespace();
                    let domain = match parts.next() {
                        Some("source") => Domain::Source,
                        Some("target") => Domain::Target,
                        _ => return Err(bad(n, "domain must be source or target")),
                    };
                    let split = match parts.next() {
                        Some("train") => Split::Train,
                        Some("test") => Split::Test,
                        _ => return Err(bad(n, "split must be train or test")),
                    };
                    let path = parts.collect::<Vec<_>>().join(" ");
                    if path.is_empty() {
                        return Err(bad(n, "missing scene path"));
                    }
                    entries.push(Entry { domain, split, path: PathBuf::from(path) });
                }
                other => return Err(bad(n, &format!("unknown key {other:?}"))),
            }
        }
        if version.as_deref() != Some(FORMAT_VERSION) {
            return Err(CliError::Data(format!("dataset manifest version {version:?}, expected {FORMAT_VERSION}")));
        }
        let classes = classes.ok_or_else(|| CliError::Data("dataset manifest lacks a class count".into()))?;
        Ok(Manifest { classes, entries })
    }
}

/// Scenes grouped the way the pipeline consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSets {
    pub train: Vec<Scene>,
    pub source_test: Vec<Scene>,
    pub target_test: Vec<Scene>,
}

impl SceneSets {
    pub fn datasets(&self) -> spectralx_core::pipeline::Datasets<'_> {
        spectralx_core::pipeline::Datasets {
            train: &self.train,
            source_test: (!self.source_test.is_empty()).then_some(self.source_test.as_slice()),
            target_test: &self.target_test,
        }
    }
}

/// The synthetic benchmark of a config: a source pool split into train and
/// held-out test scenes, plus shifted target scenes with fresh layouts.
pub fn synthesize(config: &Config) -> Result<SceneSets, CliError> {
    let seed = config.run.seed;
    let d = &config.data;
    let scenes = d.scene_config(seed);
    scenes.validate()?;
    let pool_size = d.train_scenes + d.source_test_scenes;
    let pool = generate_many(&scenes, None, 0, pool_size)?;
    let (train, test) = if d.source_test_scenes == 0 {
        ((0..pool_size).collect(), Vec::new())
    } else {
        let fraction = d.train_scenes as f64 / pool_size as f64;
        split(pool_size, fraction, seed)?
    };
    let target = generate_many(&scenes, Some(&d.domain_shift(seed)), pool_size as u64, d.target_scenes)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    Ok(SceneSets { train: pick(&train), source_test: pick(&test), target_test: target })
}

/// Writes the benchmark under `dir` and returns the manifest path.
pub fn write(config: &Config, dir: &Path) -> Result<PathBuf, CliError> {
    let sets = synthesize(config)?;
    let mut entries = Vec::new();
    let groups = [(Domain::Source, Split::Train, &sets.train), (Domain::Source, Split::Test, &sets.source_test), (Domain::Target, Split::Test, &sets.target_test)];
    for (domain, split, scenes) in groups {
        for (i, s) in scenes.iter().enumerate() {
            let name = match (domain, split) {
                (Domain::Source, Split::Train) => format!("scenes/train-{i:04}.spxr"),
                (Domain::Source, Split::Test) => format!("scenes/source-test-{i:04}.spxr"),
                _ => format!("scenes/target-{i:04}.spxr"),
            };
            files::write_raster(&dir.join(&name), &s.image, s.labels.as_ref())?;
            entries.push(Entry { domain, split, path: PathBuf::from(name) });
        }
    }
    let manifest = Manifest { classes: config.data.scene_config(config.run.seed).classes, entries };
    let path = dir.join(MANIFEST_NAME);
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, manifest.to_text())?;
    Ok(path)
}

/// Reads every scene a manifest lists.
pub fn read(manifest_path: &Path) -> Result<SceneSets, CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest = Manifest::parse(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut sets = SceneSets { train: Vec::new(), source_test: Vec::new(), target_test: Vec::new() };
    for e in &manifest.entries {
        let raster = files::read_raster(&base.join(&e.path))?;
        let labels = raster.segmentation(manifest.classes)?;
        let scene = Scene { image: raster.image, labels };
        match (e.domain, e.split) {
            (Domain::Source, Split::Train) => sets.train.push(scene),
            (Domain::Source, Split::Test) => sets.source_test.push(scene),
            (Domain::Target, Split::Test) => sets.target_test.push(scene),
            (Domain::Target, Split::Train) => return Err(CliError::Data(format!("{}: target scenes cannot be trained on", e.path.display()))),
        }
    }
    if sets.target_test.is_empty() {
        return Err(CliError::Data("dataset has no target scenes".into()));
    }
    Ok(sets)
}

/// Scenes named by `paths.dataset`, or the in-memory synthetic benchmark.
pub fn load(config: &Config) -> Result<SceneSets, CliError> {
    match &config.paths.dataset {
        Some(p) => read(p),
        None => synthesize(config),
    }
}
