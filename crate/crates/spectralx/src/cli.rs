//! Command dispatch.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use spectralx_core::backbone::Stage;
use spectralx_core::metrics::{ConfusionMatrix, MeanOver};
use spectralx_core::numerics::ParamStore;
use spectralx_core::pipeline::{self, ParamLedger, RunReport, Stage1Result, Trained};

use crate::config::{parse_override, Config};
use crate::dataset;
use crate::error::CliError;
use crate::files;
use crate::manifest::{self, Record};

#[derive(Debug, Parser)]
#[command(name = "spectralx", version, about = "Spectral adapter fine-tuning: data generation, training stages, ablation and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    /// Configuration file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "spectralx-out")]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set run.seed=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Write the synthetic source/target benchmark as SPXR files plus a dataset manifest.
    Gen,
    /// Stage 1: masked-reconstruction adaptation; writes stage1.spxc.
    Adapt,
    /// Stage 2 (after stage 1 when enabled); writes model.spxc.
    Train,
    /// Stage 3: segment the target scenes; writes PPM maps.
    Infer,
    /// Score saved maps against the target labels.
    Eval,
    /// The eight-cell component ablation matrix.
    Ablate,
    /// Aggregate run manifests into one table.
    Report,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Gen => "gen",
            Verb::Adapt => "adapt",
            Verb::Train => "train",
            Verb::Infer => "infer",
            Verb::Eval => "eval",
            Verb::Ablate => "ablate",
            Verb::Report => "report",
        }
    }
}

pub const STAGE1_FILE: &str = "stage1.spxc";
pub const MODEL_FILE: &str = "model.spxc";
pub const MAPS_DIR: &str = "maps";

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout/stderr.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("spectralx {}: {e}", cli.verb.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    let config = Config::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match cli.verb {
        Verb::Gen => gen(&config, out),
        Verb::Adapt => adapt(&config, out),
        Verb::Train => train(&config, out),
        Verb::Infer => infer(&config, out),
        Verb::Eval => eval(&config, out),
        Verb::Ablate => ablate(&config, out),
        Verb::Report => report(out),
    }
}

fn gen(config: &Config, out: &Path) -> Result<(), CliError> {
    let path = dataset::write(config, out)?;
    println!("dataset={}", path.display());
    Ok(())
}

fn backbone(config: &Config) -> Result<Option<ParamStore>, CliError> {
    let Some(path) = &config.paths.backbone_weights else { return Ok(None) };
    let mut state = Trained::build(&config.run)?;
    let n = spectralx_core::backbone::checkpoint::load(&mut state.store, &files::read_checkpoint(path)?, pipeline::is_backbone_param)?;
    if n == 0 {
        return Err(CliError::Data(format!("{}: no backbone tensors", path.display())));
    }
    Ok(Some(state.store))
}

fn adapt(config: &Config, out: &Path) -> Result<(), CliError> {
    if !config.run.stage1_active() {
        return Err(CliError::Config("stage 1 needs ablation.stage1 and a trainable tokenizer or AoMoA".into()));
    }
    let data = dataset::load(config)?;
    let s = pipeline::stage1_only(&config.run, &data.train, backbone(config)?.as_ref())?;
    files::write_checkpoint(&out.join(STAGE1_FILE), &s.store)?;
    let m = manifest::write(out, "adapt", config, &Record::from_stage1(&s))?;
    if let (Some(a), Some(b)) = (s.losses.first(), s.losses.last()) {
        println!("stage1_loss_first={a:.6}\nstage1_loss_final={b:.6}");
    }
    println!("manifest={}", m.display());
    Ok(())
}

fn load_stage1(config: &Config, out: &Path) -> Result<Option<Stage1Result>, CliError> {
    let path = config.paths.stage1.clone().unwrap_or_else(|| out.join(STAGE1_FILE));
    if !config.run.stage1_active() || (config.paths.stage1.is_none() && !path.exists()) {
        return Ok(None);
    }
    let mut state = Trained::build(&config.run)?;
    spectralx_core::backbone::checkpoint::load(&mut state.store, &files::read_checkpoint(&path)?, |_| true)?;
    let ledger = ParamLedger::new(&state.store, &config.run.policy(Stage::Adapt), Stage::Adapt);
    Ok(Some(Stage1Result { store: state.store, losses: Vec::new(), ledger }))
}

fn print_report(r: &RunReport) {
    if let Some(s) = &r.source {
        println!("source_miou={:.6}", s.miou);
    }
    if let Some(t) = &r.target {
        println!("target_miou={:.6}", t.miou);
    }
}

fn train(config: &Config, out: &Path) -> Result<(), CliError> {
    let data = dataset::load(config)?;
    let stage1 = load_stage1(config, out)?;
    let (report, state) = pipeline::run_experiment(&config.run, data.datasets(), backbone(config)?.as_ref(), stage1.as_ref())?;
    files::write_checkpoint(&out.join(MODEL_FILE), &state.store)?;
    let m = manifest::write(out, "train", config, &Record::from_report(&report))?;
    print_report(&report);
    println!("manifest={}", m.display());
    Ok(())
}

fn load_model(config: &Config, out: &Path) -> Result<Trained, CliError> {
    let path = config.paths.checkpoint.clone().unwrap_or_else(|| out.join(MODEL_FILE));
    let mut state = Trained::build(&config.run)?;
    let n = spectralx_core::backbone::checkpoint::load(&mut state.store, &files::read_checkpoint(&path)?, |_| true)?;
    if n == 0 {
        return Err(CliError::Data(format!("{}: checkpoint matches no model tensor", path.display())));
    }
    Ok(state)
}

fn infer(config: &Config, out: &Path) -> Result<(), CliError> {
    let data = dataset::load(config)?;
    let state = load_model(config, out)?;
    let res = pipeline::run_stage3(&state, &data.target_test)?;
    for (i, map) in res.maps.iter().enumerate() {
        files::write_ppm(&out.join(MAPS_DIR).join(format!("target-{i:04}.ppm")), map)?;
    }
    manifest::write(out, "infer", config, &Record { target: res.metrics.as_ref(), ..Record::default() })?;
    println!("maps={}", res.maps.len());
    if let Some(m) = &res.metrics {
        print!("{}", m.to_lines());
    }
    Ok(())
}

fn eval(config: &Config, out: &Path) -> Result<(), CliError> {
    let data = dataset::load(config)?;
    let classes = config.run.model_profile()?.backbone.classes;
    let mut cm = ConfusionMatrix::new(classes);
    for (i, scene) in data.target_test.iter().enumerate() {
        let pred = files::read_ppm(&out.join(MAPS_DIR).join(format!("target-{i:04}.ppm")), classes)?;
        let truth = scene.labels.as_ref().ok_or_else(|| CliError::Data(format!("target scene {i} has no labels")))?;
        cm.accumulate(truth, &pred)?;
    }
    let report = cm.report(MeanOver::NonzeroUnion)?;
    manifest::write(out, "eval", config, &Record { target: Some(&report), ..Record::default() })?;
    let lines = report.to_lines();
    std::fs::write(out.join("eval.txt"), &lines)?;
    print!("{lines}");
    Ok(())
}

fn ablate(config: &Config, out: &Path) -> Result<(), CliError> {
    let data = dataset::load(config)?;
    let reports = pipeline::run_ablation(&config.run, data.datasets(), backbone(config)?.as_ref())?;
    for r in &reports {
        let cell = config.with_cell(r.config.clone());
        manifest::write(out, "ablate", &cell, &Record::from_report(r))?;
        println!(
            "{:<18} trainable={:<7} source_miou={} target_miou={}",
            r.config.label(),
            r.ledger.adapter_trainable(),
            r.source.as_ref().map(|m| format!("{:.4}", m.miou)).unwrap_or_else(|| "-".into()),
            r.target.as_ref().map(|m| format!("{:.4}", m.miou)).unwrap_or_else(|| "-".into()),
        );
    }
    Ok(())
}

fn report(out: &Path) -> Result<(), CliError> {
    let runs = manifest::read_all(&out.join(manifest::RUNS_DIR))?;
    let table = manifest::table(&runs);
    std::fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
