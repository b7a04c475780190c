//! End-to-end runs of the `mdc` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mdc(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdc"));
    cmd.args(args).env_remove("MDC_SEED");
    if let Some(s) = seed_env {
        cmd.env("MDC_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let out = mdc(&["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out.stdout);
    for sub in ["schedule-dump", "loss-compare", "train", "eval", "sample", "selfcheck"] {
        assert!(help.contains(sub), "help lists {sub}");
    }
    assert_eq!(mdc(&["--version"], None).status.code(), Some(0));
    for sub in ["schedule-dump", "loss-compare", "train", "eval", "sample", "selfcheck"] {
        let out = mdc(&[sub, "--help"], None);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        assert!(text(&out.stdout).contains("--seed"));
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = mdc(&["schedule-dump", "--kind", "linear", "--bogus"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("valid flags:") && err.contains("--points"), "{err}");

    assert_eq!(mdc(&["schedule-dump", "--kind", "zigzag"], None).status.code(), Some(1));
    assert_eq!(mdc(&["loss-compare", "--m", "0"], None).status.code(), Some(1));
    assert_eq!(mdc(&["loss-compare"], Some("not-a-number")).status.code(), Some(1));
    assert_eq!(mdc(&[], None).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.mdck");
    let out = mdc(&["sample", "--checkpoint", missing.to_str().unwrap(), "--len", "4"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("error:"));

    let out = mdc(&["train", "--config", "missing.cfg", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("missing.cfg") && err.contains("No such file"), "{err}");

    let junk = dir.path().join("junk.mdck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = mdc(&["sample", "--checkpoint", junk.to_str().unwrap(), "--len", "4"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_dump_writes_table_and_sidecar_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("linear.csv");
    let out = mdc(&["schedule-dump", "--kind", "linear", "--points", "3", "--out", csv.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let table = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "t,alpha,alpha_prime,ce_weight,log_snr");
    assert_eq!(lines.len(), 4);
    // t = 1/4 under α = 1 − t: α′ = −1, weight = −1/t
    let row: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(row[0], 0.25);
    assert!((row[1] - 0.75).abs() < 1e-15);
    assert!((row[2] + 1.0).abs() < 1e-15);
    assert!((row[3] + 4.0).abs() < 1e-12);

    let m = manifest(&dir.path().join("linear.csv.manifest.json"));
    assert_eq!(m["subcommand"], "schedule-dump");
    assert_eq!(m["outputs"][0], csv.to_str().unwrap());
    assert!(m["wall_clock_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn stdout_runs_print_manifest_on_stderr() {
    let out = mdc(&["schedule-dump", "--kind", "cosine@0.001", "--points", "2"], None);
    assert_eq!(out.status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&text(&out.stderr)).unwrap();
    assert_eq!(m["outputs"][0], "<stdout>");
    assert_eq!(m["config"]["schedule"], "cosine@0.001");
}

#[test]
fn loss_compare_csv_and_seed_sources() {
    let run = |args: &[&str], env: Option<&str>| {
        let out = mdc(args, env);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        let m: serde_json::Value = serde_json::from_str(&text(&out.stderr)).unwrap();
        (text(&out.stdout), m["seed"].as_u64().unwrap())
    };
    let base = ["loss-compare", "--draws", "50", "--estimators", "ce,ctmc-ds,genmd4"];
    let (csv, seed) = run(&base, None);
    assert_eq!(seed, 0);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "estimator,mean,variance,draws");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert!(f[2].parse::<f64>().unwrap() >= 0.0);
        assert_eq!(f[3], "50");
    }

    let (env_csv, env_seed) = run(&base, Some("7"));
    assert_eq!(env_seed, 7);
    let mut flagged = base.to_vec();
    flagged.extend(["--seed", "7"]);
    let (flag_csv, _) = run(&flagged, Some("3"));
    assert_eq!(env_csv, flag_csv, "--seed overrides $MDC_SEED");
    assert_ne!(env_csv, csv);
}

#[test]
fn selfcheck_passes_and_detects_injected_fault() {
    let out = mdc(&["selfcheck"], None);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    assert_eq!(report["passed"], true);

    let out = mdc(&["selfcheck", "--inject-fault", "unconstrained-score"], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("FAILED"));
}

#[test]
fn train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "source = two_state:0.1\npredictor = tabular:neighbors:1\nchunk_len = 8\ntrain_chunks = 64\n\
         valid_chunks = 8\nbatch_size = 8\nsteps = 20\nlr = 0.05\nema_decay = 0.9\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = mdc(&["train", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    assert_eq!(manifest(&run_dir.join("manifest.json"))["subcommand"], "train");

    let ckpt = run_dir.join("checkpoint.mdck");
    let ckpt = ckpt.to_str().unwrap();
    let out = mdc(&["eval", "--checkpoint", ckpt, "--source", "two_state:0.1", "--chunk-len", "8", "--count", "4"], None);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    assert!(report["bpc"].as_f64().unwrap() > 0.0);

    let sample = |seed: &str| {
        let out = mdc(&["sample", "--checkpoint", ckpt, "--len", "8", "--num", "3", "--steps", "16", "--seed", seed], None);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        text(&out.stdout)
    };
    let a = sample("4");
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().all(|l| l.chars().count() == 8 && !l.contains('?')));
    assert_eq!(a, sample("4"));
}
