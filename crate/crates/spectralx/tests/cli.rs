use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.train_scenes=4",
    "--set",
    "data.source_test_scenes=2",
    "--set",
    "data.target_scenes=2",
    "--set",
    "run.stage1_epochs=1",
    "--set",
    "run.stage2_epochs=1",
];

fn spectralx(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectralx"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SPECTRALX_SEED")
        .output()
        .expect("spawn spectralx")
}

fn tiny(out: &Path, verb: &str, extra: &[&str]) -> Output {
    let mut args = vec![verb];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    spectralx(out, &args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("{key} missing in {stdout}"))
}

#[test]
fn gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&tiny(a.path(), "gen", &[]));
    ok(&tiny(b.path(), "gen", &[]));
    let fa = files(a.path());
    assert_eq!(fa.len(), 1 + 4 + 2 + 2);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(spectralx(d.path(), &["gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(spectralx(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(spectralx(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(spectralx(d.path(), &["gen", "--set", "run.nope=1"]).status.code(), Some(2));
    assert_eq!(spectralx(d.path(), &["gen", "--set", "run.lr=-1"]).status.code(), Some(2));
    let cfg = d.path().join("bad.conf");
    std::fs::write(&cfg, "[run]\nseed = 1\nseed = 2\n").unwrap();
    assert_eq!(spectralx(d.path(), &["gen", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = d.path().join("nowhere/dataset.txt");
    let set = format!("paths.dataset={}", missing.display());
    assert_eq!(spectralx(d.path(), &["train", "--set", &set]).status.code(), Some(3));
    // No trained model to infer with.
    assert_eq!(tiny(d.path(), "infer", &[]).status.code(), Some(3));
}

#[test]
fn stage_verbs_chain_through_files() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();
    let dataset = out.join("dataset.txt");
    let set = format!("paths.dataset={}", dataset.display());
    ok(&tiny(out, "gen", &[]));

    let s = ok(&tiny(out, "adapt", &["--set", &set]));
    assert!(value(&s, "stage1_loss_first").parse::<f64>().unwrap() > 0.0);
    assert!(out.join("stage1.spxc").exists());

    let s = ok(&tiny(out, "train", &["--set", &set]));
    let target: f64 = value(&s, "target_miou").parse().unwrap();
    assert!((0.0..=1.0).contains(&target));
    assert!(out.join("model.spxc").exists());

    let s = ok(&tiny(out, "infer", &["--set", &set]));
    assert_eq!(value(&s, "maps"), "2");
    let infer_miou: f64 = value(&s, "miou").parse().unwrap();

    let s = ok(&tiny(out, "eval", &["--set", &set]));
    let eval_miou: f64 = value(&s, "miou").parse().unwrap();
    // Maps travel through PPM files, so eval re-derives the infer metrics.
    assert_eq!(eval_miou, infer_miou);
    assert_eq!(std::fs::read_to_string(out.join("eval.txt")).unwrap(), s);

    let runs: Vec<_> = files(&out.join("runs")).into_iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    let verbs: Vec<&str> = runs.iter().map(|r| r.rsplit('-').next().unwrap()).collect();
    assert_eq!(verbs.len(), 4);
    for v in ["adapt.json", "train.json", "infer.json", "eval.json"] {
        assert!(verbs.contains(&v), "{runs:?}");
    }
}

#[test]
fn ablate_and_report() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();
    let s = ok(&tiny(out, "ablate", &[]));
    assert_eq!(s.lines().count(), 8);
    let runs = files(&out.join("runs"));
    assert_eq!(runs.len(), 8);
    for (_, bytes) in &runs {
        let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        assert_eq!(v["format"], "spectralx-run/1");
        assert_eq!(v["verb"], "ablate");
        assert!(v["target"]["miou"].is_f64());
    }

    let report = ok(&spectralx(out, &["report"]));
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 9);
    let hashes: Vec<&str> = lines[1..].iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut sorted = hashes.clone();
    sorted.sort();
    assert_eq!(hashes, sorted);
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), report);
}

#[test]
fn seed_variable_overrides_file_but_not_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.conf");
    std::fs::write(&cfg, "[run]\nseed = 1\n").unwrap();
    let gen = |dir: &Path, env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_spectralx"));
        c.arg("gen").args(TINY).args(extra).arg("--config").arg(&cfg).arg("--out").arg(dir);
        match env {
            Some(s) => c.env("SPECTRALX_SEED", s),
            None => c.env_remove("SPECTRALX_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        files(dir)
    };
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    let file_seed = gen(dirs[0].path(), None, &[]);
    let env_seed = gen(dirs[1].path(), Some("5"), &[]);
    let flag_seed = gen(dirs[2].path(), Some("5"), &["--set", "run.seed=1"]);
    let direct = gen(dirs[3].path(), None, &["--set", "run.seed=5"]);
    assert_ne!(file_seed, env_seed);
    assert_eq!(env_seed, direct);
    assert_eq!(flag_seed, file_seed);
}
