use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_modalseg");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("MODALSEG_SEED")
        .args(args)
        .output()
        .expect("spawn modalseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &str = r#"{
  "data": {"count": 10, "height": 32, "width": 32},
  "model": {"height": 32, "width": 32, "levels": 2, "encoder_widths": [2, 3], "bottleneck_width": 3},
  "train": {"steps": 4, "batch_size": 2, "checkpoint_interval": 2, "discriminator_widths": [3, 4]}
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("cfg.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        run(self.path(), args)
    }

    fn with_data(self) -> Self {
        ok(self.run(&["gen-data", "--config", "cfg.json", "--out", "data"]));
        self
    }

    fn trained(self) -> Self {
        let ws = self.with_data();
        ok(ws.run(&[
            "train", "--config", "cfg.json", "--data", "data", "--out", "run",
        ]));
        ws
    }

    fn files(&self, sub: &str) -> Vec<PathBuf> {
        let mut v: Vec<_> = fs::read_dir(self.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v
    }
}

#[test]
fn gen_data_writes_split_and_is_reproducible() {
    let ws = Workspace::new();
    let out = ok(ws.run(&[
        "gen-data", "--config", "cfg.json", "--out", "a", "--seed", "7",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("8 train, 2 test"), "{stdout}");
    assert!(stdout.contains("seed 7"), "{stdout}");
    ok(ws.run(&[
        "gen-data", "--config", "cfg.json", "--out", "b", "--seed", "7",
    ]));
    let a = ws.files("a/samples");
    let b = ws.files("b/samples");
    assert_eq!(a.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(
        fs::read(ws.path().join("a/manifest.json")).unwrap(),
        fs::read(ws.path().join("b/manifest.json")).unwrap()
    );
}

#[test]
fn seed_precedence_flag_then_file_then_env() {
    let ws = Workspace::new();
    let env_run = |out: &str, extra: &[&str]| {
        let mut args = vec!["gen-data", "--out", out, "--count", "3"];
        args.extend_from_slice(extra);
        Command::new(BIN)
            .current_dir(ws.path())
            .env("MODALSEG_SEED", "42")
            .args(&args)
            .output()
            .unwrap()
    };
    let s = String::from_utf8_lossy(&ok(env_run("e1", &[])).stdout).to_string();
    assert!(s.contains("seed 42"), "{s}");
    let s = String::from_utf8_lossy(&ok(env_run("e2", &["--seed", "5"])).stdout).to_string();
    assert!(s.contains("seed 5"), "{s}");
    fs::write(ws.path().join("seeded.json"), r#"{"data": {"seed": 9}}"#).unwrap();
    let s = String::from_utf8_lossy(&ok(env_run("e3", &["--config", "seeded.json"])).stdout)
        .to_string();
    assert!(s.contains("seed 9"), "{s}");
}

#[test]
fn missing_out_is_usage_error() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["gen-data", "--config", "cfg.json"])), 2);
}

#[test]
fn invalid_config_exits_2_without_outputs() {
    let ws = Workspace::new();
    fs::write(ws.path().join("bad.json"), r#"{"data": {"count": 0}}"#).unwrap();
    assert_eq!(
        code(&ws.run(&["gen-data", "--config", "bad.json", "--out", "d"])),
        2
    );
    assert!(!ws.path().join("d").exists());

    fs::write(ws.path().join("unknown.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(
        code(&ws.run(&["gen-data", "--config", "unknown.json", "--out", "d"])),
        2
    );
    assert!(!ws.path().join("d").exists());

    let ws = ws.with_data();
    let out = ws.run(&[
        "train", "--config", "cfg.json", "--data", "data", "--out", "r", "--lr", "-1",
    ]);
    assert_eq!(code(&out), 2);
    assert!(!ws.path().join("r").exists());
}

#[test]
fn missing_dataset_is_io_error() {
    let ws = Workspace::new();
    let out = ws.run(&[
        "train", "--config", "cfg.json", "--data", "nowhere", "--out", "r",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_is_deterministic_and_writes_checkpoints() {
    let ws = Workspace::new().with_data();
    for out in ["r1", "r2"] {
        ok(ws.run(&[
            "train", "--config", "cfg.json", "--data", "data", "--out", out, "--seed", "1",
        ]));
    }
    let m1 = fs::read(ws.path().join("r1/metrics.jsonl")).unwrap();
    let m2 = fs::read(ws.path().join("r2/metrics.jsonl")).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(String::from_utf8(m1).unwrap().lines().count(), 4);
    let names: Vec<_> = ws
        .files("r1")
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "final.mmck",
            "metrics.jsonl",
            "step_000002.mmck",
            "step_000004.mmck"
        ]
    );
}

#[test]
fn train_zero_steps_writes_only_a_checkpoint() {
    let ws = Workspace::new().with_data();
    ok(ws.run(&[
        "train", "--config", "cfg.json", "--data", "data", "--out", "r", "--steps", "0",
    ]));
    assert!(ws.path().join("r/final.mmck").is_file());
    let metrics = fs::read_to_string(ws.path().join("r/metrics.jsonl")).unwrap_or_default();
    assert!(metrics.trim().is_empty());
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let ws = Workspace::new().with_data();
    ok(ws.run(&[
        "train", "--config", "cfg.json", "--data", "data", "--out", "full",
    ]));
    ok(ws.run(&[
        "train", "--config", "cfg.json", "--data", "data", "--out", "part", "--steps", "2",
    ]));
    ok(ws.run(&[
        "train",
        "--config",
        "cfg.json",
        "--data",
        "data",
        "--out",
        "part",
        "--resume",
        "part/final.mmck",
    ]));
    assert_eq!(
        fs::read(ws.path().join("full/metrics.jsonl")).unwrap(),
        fs::read(ws.path().join("part/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(ws.path().join("full/final.mmck")).unwrap(),
        fs::read(ws.path().join("part/final.mmck")).unwrap()
    );
}

#[test]
fn eval_formats_and_row_filter() {
    let ws = Workspace::new().trained();
    let base = [
        "eval",
        "--config",
        "cfg.json",
        "--checkpoint",
        "run/final.mmck",
        "--data",
        "data",
    ];

    let mut args = base.to_vec();
    args.extend(["--format", "csv"]);
    let csv = String::from_utf8(ok(ws.run(&args)).stdout).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "{csv}");
    assert_eq!(lines[0], "row,WT,TC,EC,slices");
    let rows: Vec<_> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        rows,
        [
            "full",
            "missing-T1",
            "missing-T1c",
            "missing-T2",
            "missing-FLAIR"
        ]
    );

    let mut args = base.to_vec();
    args.extend([
        "--format",
        "csv",
        "--mask",
        "missing-FLAIR",
        "--output",
        "one.csv",
    ]);
    ok(ws.run(&args));
    let one = fs::read_to_string(ws.path().join("one.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
    assert!(one.lines().nth(1).unwrap().starts_with("missing-FLAIR,"));

    let mut args = base.to_vec();
    args.extend(["--format", "json"]);
    let json: serde_json::Value = serde_json::from_slice(&ok(ws.run(&args)).stdout).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);

    let text = String::from_utf8(ok(ws.run(&base)).stdout).unwrap();
    assert!(text.contains("missing-T1c"));

    let mut args = base.to_vec();
    args.extend(["--format", "xml"]);
    assert_eq!(code(&ws.run(&args)), 2);
    let mut args = base.to_vec();
    args.extend(["--mask", "missing-PD"]);
    assert_eq!(code(&ws.run(&args)), 2);
}

#[test]
fn eval_missing_checkpoint_is_io_error() {
    let ws = Workspace::new().with_data();
    let out = ws.run(&["eval", "--checkpoint", "nope.mmck", "--data", "data"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn relevance_writes_all_pairs_or_one() {
    let ws = Workspace::new().trained();
    let base = [
        "relevance",
        "--config",
        "cfg.json",
        "--checkpoint",
        "run/final.mmck",
        "--data",
        "data",
    ];

    let mut args = base.to_vec();
    args.extend(["--out", "all"]);
    ok(ws.run(&args));
    let files = ws.files("all");
    let ppm = files
        .iter()
        .filter(|p| p.extension().unwrap() == "ppm")
        .count();
    let wemp = files
        .iter()
        .filter(|p| p.extension().unwrap() == "wemp")
        .count();
    assert_eq!((ppm, wemp), (16, 16));

    let mut args = base.to_vec();
    args.extend(["--out", "one", "--channel", "FLAIR", "--class", "ED"]);
    ok(ws.run(&args));
    let files = ws.files("one");
    assert_eq!(files.len(), 2);
    assert!(files[0]
        .file_name()
        .unwrap()
        .to_string_lossy()
        .ends_with("_FLAIR_ED.ppm"));

    let mut args = base.to_vec();
    args.extend(["--out", "bad", "--channel", "PD"]);
    let out = ws.run(&args);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["T1", "T1c", "T2", "FLAIR"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!ws.path().join("bad").exists());
}

#[test]
fn help_documents_flags_and_defaults() {
    let ws = Workspace::new();
    let out = ok(ws.run(&["train", "--help"]));
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--data",
        "--out",
        "--resume",
        "--seed",
        "--steps",
        "--batch-size",
        "--lr",
        "--d-lr",
        "--alpha",
        "--beta",
        "--checkpoint-interval",
    ] {
        assert!(help.contains(flag), "missing {flag} in\n{help}");
    }
    assert!(help.contains("default"));
    let top = String::from_utf8_lossy(&ok(ws.run(&["--help"])).stdout).into_owned();
    assert!(top.contains("MODALSEG_SEED"));
    assert!(top.contains("Exit codes"));
}
