//! End-to-end runs of the binary on tiny episodes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] =
    &["--n-classes", "3", "--n-tok", "12", "--d", "8", "--signal-tokens", "2", "--shots", "3", "--test-per-class", "4"];
const SMALL_MODEL: &[&str] = &["--width", "8", "--heads", "2", "--n-proto", "2", "--k-act", "4", "--epochs", "2"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotlighter"))
        .args(args)
        .env_remove("SPOTLIGHTER_SEED")
        .output()
        .unwrap()
}

fn run_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotlighter")).args(args).env("SPOTLIGHTER_SEED", seed).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--out", p(dir)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

fn train(dir: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(dir), "--out", p(ckpt), "--quiet"];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen", "--out", "/tmp/x", "--noise-sigma", "-1"])), 1);
    assert_eq!(code(&run(&["gen", "--out", "/tmp/x", "--signal-tokens", "99", "--n-tok", "4"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&["eval", "--checkpoint", p(&junk), "--data", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_is_deterministic_and_seed_sensitive() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(a.path(), &["--seed", "3"])), 0);
    assert_eq!(code(&gen(b.path(), &["--seed", "3"])), 0);
    assert_eq!(code(&gen(c.path(), &["--seed", "4"])), 0);
    for f in ["base_train.spot", "base_test.spot", "novel_test.spot"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert_ne!(x, fs::read(c.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn env_seed_is_the_default_and_flags_win() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut args = vec!["gen", "--out", p(dirs[0].path())];
    args.extend_from_slice(TINY);
    assert_eq!(code(&run_env(&args, "11")), 0);
    assert_eq!(code(&gen(dirs[1].path(), &["--seed", "11"])), 0);
    let mut args = vec!["gen", "--out", p(dirs[2].path()), "--seed", "11"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&run_env(&args, "99")), 0);
    let read = |i: usize| fs::read(dirs[i].path().join("base_train.spot")).unwrap();
    assert_eq!(read(0), read(1));
    assert_eq!(read(2), read(1));
    let mut bad = vec!["gen", "--out", p(dirs[0].path())];
    bad.extend_from_slice(TINY);
    assert_eq!(code(&run_env(&bad, "seven")), 1);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), &[])), 0);
    let ckpt = dir.path().join("m.ckpt");
    let o = train(dir.path(), &ckpt, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    assert_eq!(report["history"].as_array().unwrap().len(), 2);
    assert!(report["trainable_param_count"].as_u64().unwrap() > 0);

    let json = dir.path().join("eval.json");
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(dir.path()), "--json", p(&json)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let ev: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let row = |name: &str| table.lines().find(|l| l.starts_with(name)).unwrap().split_whitespace().nth(1).unwrap().to_string();
    assert_eq!(row("base"), format!("{:.2}", ev["base"]["accuracy"].as_f64().unwrap()));
    assert_eq!(row("novel"), format!("{:.2}", ev["novel"]["accuracy"].as_f64().unwrap()));
    assert_eq!(row("hm"), format!("{:.2}", ev["hm"].as_f64().unwrap()));
    assert_eq!(ev["base"]["total"], 12);

    for tier in ["lev1", "lev2", "both"] {
        let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(dir.path()), "--tier", tier]);
        assert_eq!(code(&o), 0, "{tier}");
    }
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(dir.path()), "--k", "13"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn zero_weights_leave_only_the_classification_loss() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), &[])), 0);
    let o = train(
        dir.path(),
        &dir.path().join("m.ckpt"),
        &["--set", "lambda1=0", "--set", "lambda2=0", "--set", "lambda3=0"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for rec in stdout_json(&o)["history"].as_array().unwrap() {
        assert_eq!(rec["loss"]["total"], rec["loss"]["cls"]);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), &[])), 0);
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# tiny run\nepochs = 3\nlr = 0.05   # step size\nn_proto=2\n").unwrap();
    let o = train(dir.path(), &dir.path().join("a.ckpt"), &["--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    // SMALL_MODEL passes --epochs 2, which beats the file.
    assert_eq!(r["config"]["epochs"], 2);
    assert_eq!(r["config"]["lr"], 0.05);

    fs::write(&cfg, "epochs = 3\nbogus_key = 1\n").unwrap();
    assert_eq!(code(&train(dir.path(), &dir.path().join("b.ckpt"), &["--config", p(&cfg)])), 1);
    assert_eq!(code(&train(dir.path(), &dir.path().join("c.ckpt"), &["--set", "beta=2"])), 1);
}

#[test]
fn ablate_writes_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), &[])), 0);
    let csv = dir.path().join("ablation.csv");
    let mut args = vec!["ablate", "--data", p(dir.path()), "--out", p(&csv)];
    args.extend_from_slice(SMALL_MODEL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "semantic_on,init_mode,recalc_on,selection_variant,tier_mode,base,novel,hm,items_per_sec,error"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 72);
    assert!(rows.iter().all(|r| r.ends_with(',')), "no cell should fail");
}

#[test]
fn bench_reports_each_k_and_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), &[])), 0);
    let ckpt = dir.path().join("m.ckpt");
    let mut args = vec!["train", "--data", p(dir.path()), "--out", p(&ckpt), "--quiet", "--k-act", "4"];
    args.extend_from_slice(&["--width", "8", "--heads", "2", "--n-proto", "2", "--epochs", "1"]);
    assert_eq!(code(&run(&args)), 0);
    let csv = dir.path().join("bench.csv");
    let mut args = vec!["bench", "--checkpoint", p(&ckpt), "--items", "120", "--k", "2,4,6,8", "--csv", p(&csv)];
    args.extend_from_slice(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["full_token"]["k"], 12);
    let lines: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert!(lines[0].starts_with("k,reference,items_per_sec"));
    assert_eq!(lines.len(), 6);

    let mut few = vec!["bench", "--checkpoint", p(&ckpt), "--items", "30"];
    few.extend_from_slice(TINY);
    assert_eq!(code(&run(&few)), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_gradient() {
    let o = run(&["gradcheck", "--seeds", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!(s["passed"], true);
    assert!(s["max_rel_error"].as_f64().unwrap() < 1e-4);
    let o = run(&["gradcheck", "--seeds", "2", "--corrupt-gradient"]);
    assert_eq!(code(&o), 3);
    assert_eq!(code(&run(&["gradcheck", "--width", "32", "--heads", "4", "--seeds", "1"])), 1);
}
