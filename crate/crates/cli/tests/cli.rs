use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
schema_version = 1
method = "sdpo"

[schedule]
steps = 100
beta_start = 1e-4
beta_end = 0.2

[net]
hidden = 16

[pretrain]
steps = 60
batch_size = 32

[pairs]
n = 48

[align]
steps = 20
batch_size = 16
learning_rate = 1e-3
diagnostics_every = 10
density_windows = [[50, 60], [2, 10]]
density_pairs = 16
eval_samples = 32

[iterate]
rounds = 2
pairs_per_round = 16
epochs = 2

[diagnose]
bins = 4
samples = 32

[sde]
paths = 100
n_steps = 40
trace_paths = 3
"#;

fn prefdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefdiff")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

/// Name → bytes of every CSV in `dir`.
fn csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn run_twice(args: &[&str]) -> (BTreeMap<String, Vec<u8>>, BTreeMap<String, Vec<u8>>) {
    let (dir, cfg) = setup();
    let mut out = Vec::new();
    for name in ["a", "b"] {
        let o = dir.path().join(name);
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", &cfg, "--out", o.to_str().unwrap()]);
        let res = prefdiff(&full);
        assert!(res.status.success(), "{args:?}: {}", stderr(&res));
        out.push(csvs(&o));
    }
    let b = out.pop().unwrap();
    (out.pop().unwrap(), b)
}

#[test]
fn align_rerun_is_byte_identical() {
    let (a, b) = run_twice(&["align", "--method", "sdpo", "--seed", "7"]);
    for name in ["pretrain.csv", "pairs.csv", "training_log.csv", "weights.csv", "density.csv", "rewards.csv"] {
        assert!(a.contains_key(name), "missing {name}");
    }
    assert_eq!(a, b);
}

#[test]
fn other_commands_rerun_identically() {
    for args in [
        &["iterate", "--method", "dpo", "--seed", "3"][..],
        &["diagnose", "--what", "weight-curve", "--seed", "3"],
        &["gen-pairs", "--unlike", "--seed", "3"],
        &["sde-sample", "--seed", "3"],
    ] {
        let (a, b) = run_twice(args);
        assert!(!a.is_empty(), "{args:?} wrote no CSV");
        assert_eq!(a, b, "{args:?}");
    }
}

#[test]
fn seed_changes_output() {
    let (dir, cfg) = setup();
    let mut logs = Vec::new();
    for seed in ["1", "2"] {
        let o = dir.path().join(seed);
        let res = prefdiff(&["pretrain", "--config", &cfg, "--seed", seed, "--out", o.to_str().unwrap()]);
        assert!(res.status.success(), "{}", stderr(&res));
        logs.push(fs::read(o.join("pretrain.csv")).unwrap());
    }
    assert_ne!(logs[0], logs[1]);
}

#[test]
fn csv_headers() {
    let (dir, cfg) = setup();
    let o = dir.path().join("run");
    let res = prefdiff(&["align", "--config", &cfg, "--seed", "1", "--out", o.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let header = |f: &str| fs::read_to_string(o.join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("training_log.csv"), "run_id,step,t,method,loss,logit,w_raw,w_clipped,beta");
    assert_eq!(header("density.csv"), "run_id,step,t_lo,t_hi,logp_w,logp_l,diff,margin");
    assert_eq!(header("rewards.csv"), "run_id,stage,mean_reward");
    assert_eq!(header("pretrain.csv"), "run_id,step,loss");
}

#[test]
fn report_renders_plots() {
    let (dir, cfg) = setup();
    let o = dir.path().join("run");
    let out = o.to_str().unwrap();
    assert!(prefdiff(&["align", "--config", &cfg, "--seed", "1", "--out", out]).status.success());
    let res = prefdiff(&["report", "--run", out]);
    assert!(res.status.success(), "{}", stderr(&res));
    for svg in ["pretrain.svg", "loss.svg", "density.svg"] {
        assert!(fs::read_to_string(o.join(svg)).unwrap().starts_with("<svg"), "{svg}");
    }
    assert!(o.join("summary.md").exists());
    // Nothing to plot is an error.
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(prefdiff(&["report", "--run", empty.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[align]\nlearning_rate = -1.0\n").unwrap();
    let o = dir.path().join("o");
    let res = prefdiff(&["align", "--config", bad.to_str().unwrap(), "--seed", "1", "--out", o.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert!(err.starts_with("error: kind=config field=align.learning_rate"), "{err}");
    assert!(!o.join("pretrain.csv").exists(), "compute ran before validation");

    fs::write(&bad, "bogus = 1\n").unwrap();
    let res = prefdiff(&["pretrain", "--config", bad.to_str().unwrap(), "--seed", "1", "--out", o.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("field=bogus"), "{}", stderr(&res));
}

#[test]
fn usage_errors_exit_2() {
    let res = prefdiff(&["align", "--out", "x"]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert!(err.starts_with("error: kind=usage"), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert_eq!(prefdiff(&["align", "--seed", "1", "--out", "x", "--method", "ppo"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_log() {
    let (dir, cfg) = setup();
    let o = dir.path().join("o");
    let missing = dir.path().join("nope.ckpt");
    let res = prefdiff(&[
        "align",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--out",
        o.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = stderr(&res);
    assert!(err.contains(" log="), "{err}");
    assert!(fs::read_to_string(o.join("run.log")).unwrap().contains("failed"));
}
