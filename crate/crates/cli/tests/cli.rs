use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_grpp");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) {
    ok(&[
        "--deterministic",
        "simulate",
        "--dim",
        "10",
        "--sequences",
        "30",
        "--horizon",
        "60",
        "--seed",
        seed,
        "--rate-scale",
        "20",
        "--out",
        p(dir),
    ]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "--deterministic",
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--set",
        "epochs=2",
        "--set",
        "m=6",
        "--set",
        "d=6",
        "--set",
        "batch_size=8",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = run(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn bad_flags_and_bad_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["simulate", "--dim", "7"]).status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "recover", "--checkpoint", "x", "--out", "y"]).status.code(), Some(2));
    let data = tmp.path().join("data");
    simulate(&data, "1");
    let out = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o")), "--set", "epochs=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o")), "--set", "colour=red"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = fast\n").unwrap();
    let out = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_ground_truth_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "3");
    for f in ["events.jsonl", "ground_truth_A.csv", "mu.csv", "metadata.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let meta = json(&data.join("metadata.json"));
    assert_eq!(meta["K"], 10);
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 3);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o.as_str().unwrap().ends_with("events.jsonl")));
    let a = fs::read_to_string(data.join("ground_truth_A.csv")).unwrap();
    assert_eq!(a.lines().count(), 10);
    assert!(a.lines().all(|l| l.split(',').count() == 10));
}

#[test]
fn train_records_defaults_and_ablation_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "1");
    let out = tmp.path().join("run");
    train(&data, &out, &["--ablate", "woat"]);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("gamma = 0.01"), "{cfg}");
    assert!(cfg.contains("dropout = 0.2"), "{cfg}");
    assert!(cfg.contains("disable_history_attention = true"), "{cfg}");
    assert_eq!(json(&out.join("summary.json"))["ablation"], "woAT");
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["gamma"], 0.01);
    assert_eq!(manifest["config"]["epochs"], 2);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "epoch,train_loss,valid_nll,valid_graph_loss,seconds");
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn eval_on_fresh_model_and_recover_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "2");
    let run_dir = tmp.path().join("run");
    train(&data, &run_dir, &["--set", "epochs=0"]);
    let ckpt = run_dir.join("checkpoint.json");
    let eval_a = tmp.path().join("eval_a");
    let eval_b = tmp.path().join("eval_b");
    for e in [&eval_a, &eval_b] {
        ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(e)]);
    }
    let m = json(&eval_a.join("metrics.json"));
    assert!(m["rmse"].as_f64().unwrap().is_finite());
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(m["n_events"].as_u64().unwrap() > 0);
    for f in ["metrics.json", "predictions.csv"] {
        assert_eq!(fs::read(eval_a.join(f)).unwrap(), fs::read(eval_b.join(f)).unwrap(), "{f}");
    }

    let a = tmp.path().join("A.csv");
    ok(&["recover", "--checkpoint", p(&ckpt), "--out", p(&a)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let row: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(row.len(), 10);
        assert!(row.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn recover_identity_omega_orthonormal_h_gives_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "4");
    let run_dir = tmp.path().join("run");
    train(&data, &run_dir, &["--set", "epochs=0", "--set", "d=12"]);
    let ckpt_path = run_dir.join("checkpoint.json");
    let mut ckpt = json(&ckpt_path);
    let d = ckpt["d"].as_u64().unwrap() as usize;
    let k = ckpt["k"].as_u64().unwrap() as usize;
    let specs = ckpt["specs"].as_array().unwrap().clone();
    let values = ckpt["values"].as_array_mut().unwrap();
    for s in &specs {
        let offset = s["offset"].as_u64().unwrap() as usize;
        let cols = s["cols"].as_u64().unwrap() as usize;
        let len = s["rows"].as_u64().unwrap() as usize * cols;
        if matches!(s["name"].as_str().unwrap(), "node_embedding" | "omega") {
            assert_eq!(cols, d);
            for n in 0..len {
                values[offset + n] = serde_json::json!(if n / d == n % d { 1.0 } else { 0.0 });
            }
        }
    }
    fs::write(&ckpt_path, serde_json::to_string(&ckpt).unwrap()).unwrap();

    let a_path = tmp.path().join("A.csv");
    ok(&["recover", "--checkpoint", p(&ckpt_path), "--out", p(&a_path)]);
    let text = fs::read_to_string(&a_path).unwrap();
    assert_eq!(text.lines().count(), k);
    for (i, line) in text.lines().enumerate() {
        for (j, x) in line.split(',').enumerate() {
            let x: f64 = x.parse().unwrap();
            assert_eq!(x, if i == j { 1.0 } else { 0.0 }, "({i},{j})");
        }
    }
}

#[test]
fn eval_rejects_format_version_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "5");
    let run_dir = tmp.path().join("run");
    train(&data, &run_dir, &["--set", "epochs=0"]);
    let ckpt_path = run_dir.join("checkpoint.json");
    let mut ckpt = json(&ckpt_path);
    ckpt["format_version"] = serde_json::json!(999);
    fs::write(&ckpt_path, serde_json::to_string(&ckpt).unwrap()).unwrap();
    let out = run(&["eval", "--checkpoint", p(&ckpt_path), "--data", p(&data), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
