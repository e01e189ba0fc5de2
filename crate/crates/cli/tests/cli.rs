use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_implicit-seq-lab");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "train.phases.0.steps=3",
    "train.phases.1.steps=2",
    "train.phases.1.solver.max_iters=4",
    "eval.samples=4",
    "eval.solver.max_iters=8",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn presets_lists_every_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["presets"]);
    for name in [
        "parity-implicit",
        "parity-explicit",
        "s5-implicit",
        "mixed-a5-p0.1",
        "fig3-unrolled",
        "jacobian-fig10",
    ] {
        assert!(out.lines().any(|l| l == name), "{name} missing");
    }
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &["--preset", "parity-implicit", "show-config", "seed=7", "eval.samples=3"],
    );
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["eval"]["samples"], 3);
}

#[test]
fn unknown_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--preset", "parity-implicit", "show-config", "model.d_modle=8"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_modle"));
}

#[test]
fn unknown_preset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!run(dir.path(), &["--preset", "nope", "show-config"]).status.success());
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--preset", "parity-implicit", "gen-data", "--samples", "5", "eval.samples=3"],
    );
    let train = std::fs::read_to_string(dir.path().join("train.txt")).unwrap();
    let eval = std::fs::read_to_string(dir.path().join("eval.txt")).unwrap();
    assert_eq!(train.lines().count(), 6);
    assert_eq!(eval.lines().count(), 4);
    assert!(dir.path().join("config.resolved.json").exists());
}

#[test]
fn train_eval_and_duality_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("train");
    ok(&run_dir, &with_tiny(&["--preset", "parity-implicit", "train"]));
    for f in ["config.resolved.json", "metrics.jsonl", "final.ckpt", "eval.json", "eval.csv"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 4);
    assert_eq!(last["phase"], "free");

    // the resolved config alone reproduces the run
    let config = run_dir.join("config.resolved.json");
    let ck = run_dir.join("final.ckpt");
    let eval_dir = dir.path().join("eval");
    let cfg = config.to_str().unwrap();
    let ckp = ck.to_str().unwrap();
    let report = ok(&eval_dir, &["--config", cfg, "eval", "--checkpoint", ckp]);
    assert!(report.contains("accuracy"));
    let first: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    let again: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(first, again);

    let dual = dir.path().join("dual");
    ok(&dual, &["--config", cfg, "duality-check", "--checkpoint", ckp]);
    let d: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dual.join("duality.json")).unwrap()).unwrap();
    assert!(d["token_match_rate"].as_f64().unwrap() <= 1.0);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("train");
    ok(&run_dir, &with_tiny(&["--preset", "parity-implicit", "train"]));
    let ck = run_dir.join("final.ckpt");
    let o = run(
        &dir.path().join("eval"),
        &[
            "--preset",
            "parity-implicit",
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "model.z_gain=0.9",
        ],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn resume_continues_to_the_same_weights() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    ok(&full, &with_tiny(&["--preset", "parity-implicit", "train"]));
    let part = dir.path().join("part");
    ok(&part, &with_tiny(&["--preset", "parity-implicit", "train"]));
    let boundary = std::fs::read_dir(&part)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("phase-0"))
        .unwrap();
    let resumed = dir.path().join("resumed");
    let mut args = with_tiny(&["--preset", "parity-implicit", "train", "--resume"]);
    let b = boundary.to_str().unwrap().to_string();
    args.insert(4, &b);
    ok(&resumed, &args);
    let a = implicit_seq_core::checkpoint::load(&full.join("final.ckpt")).unwrap();
    let r = implicit_seq_core::checkpoint::load(&resumed.join("final.ckpt")).unwrap();
    let (ma, mr) = (a.model::<f32>().unwrap(), r.model::<f32>().unwrap());
    assert_eq!(ma.params(), mr.params());
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["grad-check"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("grad_check.json")).unwrap()).unwrap();
    assert!(v["worst_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn scan_bench_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["scan-bench", "--min-log2", "4", "--max-log2", "6", "--channels", "4", "--reps", "1"],
    );
    let csv = std::fs::read_to_string(dir.path().join("scan_bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn jacobian_check_runs_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "jacobian-check",
            "--seeds",
            "1",
            "--prefix",
            "3",
            "model.d_model=16",
            "model.n_heads=4",
            "model.d_head=8",
            "eval.solver.tolerance=1e-10",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("jacobian.json")).unwrap()).unwrap();
    assert!(v.as_array().is_some_and(|a| !a.is_empty()));
}
