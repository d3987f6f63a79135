//! Run manifests: one JSON record per run, named `<config hash>-<verb>.json`.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use spectralx_core::metrics::MetricsReport;
use spectralx_core::pipeline::{ParamLedger, RunReport, Stage1Result};

use crate::config::{keys, Config};
use crate::error::CliError;

pub const FORMAT: &str = "spectralx-run/1";
pub const RUNS_DIR: &str = "runs";

fn ledger_json(l: &ParamLedger) -> Value {
    let modules: Vec<Value> = l
        .modules
        .iter()
        .map(|m| json!({ "module": m.module.name(), "trainable": m.trainable, "frozen": m.frozen }))
        .collect();
    json!({
        "stage": l.stage as u8,
        "modules": modules,
        "trainable": l.trainable,
        "frozen": l.frozen,
        "adapter_trainable": l.adapter_trainable(),
    })
}

pub fn metrics_json(m: &MetricsReport) -> Value {
    json!({
        "per_class_iou": m.per_class_iou,
        "miou": m.miou,
        "m_f1": m.m_f1,
        "m_acc": m.m_acc,
        "pixels": m.pixels,
    })
}

fn config_json(c: &Config) -> Value {
    let map: Map<String, Value> = keys().iter().map(|k| (k.to_string(), Value::String(c.get(k).unwrap_or_default()))).collect();
    Value::Object(map)
}

/// Everything a manifest records. Absent parts serialize as `null` or `[]`.
#[derive(Debug, Clone, Default)]
pub struct Record<'a> {
    pub stage1_losses: &'a [f64],
    pub stage1_ledger: Option<&'a ParamLedger>,
    pub ledger: Option<&'a ParamLedger>,
    pub stage2_losses: &'a [f64],
    pub val_miou: &'a [f64],
    pub source: Option<&'a MetricsReport>,
    pub target: Option<&'a MetricsReport>,
}

impl<'a> Record<'a> {
    pub fn from_report(r: &'a RunReport) -> Self {
        Record {
            stage1_losses: &r.stage1_losses,
            stage1_ledger: r.stage1_ledger.as_ref(),
            ledger: Some(&r.ledger),
            stage2_losses: &r.stage2.losses,
            val_miou: &r.stage2.val_miou,
            source: r.source.as_ref(),
            target: r.target.as_ref(),
        }
    }

    pub fn from_stage1(s: &'a Stage1Result) -> Self {
        Record { stage1_losses: &s.losses, stage1_ledger: Some(&s.ledger), ..Record::default() }
    }
}

pub fn to_json(verb: &str, config: &Config, rec: &Record) -> Value {
    json!({
        "format": FORMAT,
        "verb": verb,
        "config_hash": config.hash(),
        "label": config.run.label(),
        "seed": config.run.seed,
        "config": config_json(config),
        "stage1_ledger": rec.stage1_ledger.map(ledger_json),
        "ledger": rec.ledger.map(ledger_json),
        "stage1_losses": rec.stage1_losses,
        "stage2_losses": rec.stage2_losses,
        "val_miou": rec.val_miou,
        "source": rec.source.map(metrics_json),
        "target": rec.target.map(metrics_json),
    })
}

/// Writes the manifest under `<out>/runs/` and returns its path.
pub fn write(out: &Path, verb: &str, config: &Config, rec: &Record) -> Result<PathBuf, CliError> {
    let dir = out.join(RUNS_DIR);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}-{verb}.json", config.hash()));
    let mut text = serde_json::to_string_pretty(&to_json(verb, config, rec)).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Every manifest in `dir`, ordered by config hash then verb.
pub fn read_all(dir: &Path) -> Result<Vec<Value>, CliError> {
    let mut runs = Vec::new();
    let listing = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in listing {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if v["format"] != FORMAT {
            return Err(CliError::Data(format!("{}: not a run manifest", path.display())));
        }
        runs.push(v);
    }
    let key = |v: &Value| (v["config_hash"].as_str().unwrap_or("").to_string(), v["verb"].as_str().unwrap_or("").to_string());
    runs.sort_by_key(key);
    Ok(runs)
}

fn num(v: &Value, digits: usize) -> String {
    v.as_f64().map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width comparison table of the given manifests.
pub fn table(runs: &[Value]) -> String {
    let mut out = format!("{:<16}  {:<7}  {:<18}  {:>4}  {:>9}  {:>9}  {:>8}  {:>8}\n", "config", "verb", "cell", "seed", "trainable", "s1_final", "src_miou", "tgt_miou");
    for r in runs {
        let trainable = r["ledger"]["adapter_trainable"].as_u64().or_else(|| r["stage1_ledger"]["adapter_trainable"].as_u64());
        let s1 = r["stage1_losses"].as_array().and_then(|a| a.last()).cloned().unwrap_or(Value::Null);
        out.push_str(&format!(
            "{:<16}  {:<7}  {:<18}  {:>4}  {:>9}  {:>9}  {:>8}  {:>8}\n",
            r["config_hash"].as_str().unwrap_or("?"),
            r["verb"].as_str().unwrap_or("?"),
            r["label"].as_str().unwrap_or("?"),
            r["seed"],
            trainable.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            num(&s1, 4),
            num(&r["source"]["miou"], 4),
            num(&r["target"]["miou"], 4),
        ));
    }
    out
}
