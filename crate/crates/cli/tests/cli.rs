//! End-to-end tests of the `plot` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plot_core::dataio::{load_dataset, save_model};
use plot_core::head::{Method, MethodKind};
use plot_core::trainer::{init_model, TrainConfig};

fn plot_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plot"))
}

fn run(args: &[&str]) -> Output {
    plot_bin().args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    plot_bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_with_m(dir: &Path, name: &str, m: usize) -> PathBuf {
    let path = dir.join(name);
    let m_str = m.to_string();
    let path_str = path.to_str().unwrap().to_owned();
    let args = vec![
        "gen", "--classes", "3", "--attributes", "2", "--shots", "4", "--test", "4",
        "--m", &m_str, "--dim", "16", "--sigma", "0.05", "--bg", "2", "--seed", "5",
        "--out", &path_str,
    ];
    let out = run(&args);
    assert!(out.status.success(), "gen failed: {out:?}");
    path
}

fn gen_small(dir: &Path, name: &str) -> PathBuf {
    gen_with_m(dir, name, 9)
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), "a.plotfs");
    let b = gen_small(dir.path(), "b.plotfs");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(load_dataset(&a).is_ok());
}

#[test]
fn gen_rejects_zero_m_with_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--m",
        "0",
        "--out",
        dir.path().join("x.plotfs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn full_pipeline_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.plotfs");
    let model = dir.path().join("m.json");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "5",
        "--n-prompts",
        "2",
        "--batch-size",
        "6",
    ]);
    assert!(out.status.success(), "{out:?}");
    // one loss line per epoch
    let train_log: Vec<&str> = stdout(&out)
        .lines()
        .filter(|l| l.starts_with("epoch "))
        .map(|_| "")
        .collect();
    assert_eq!(train_log.len(), 5);

    let report = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["accuracy"].is_number());
    assert_eq!(parsed["per_class_accuracy"].as_array().unwrap().len(), 3);

    // repeated eval gives the identical classification outcome
    let report2 = dir.path().join("report2.json");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report",
        report2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let parsed2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    assert_eq!(parsed["accuracy"], parsed2["accuracy"]);
    assert_eq!(parsed["per_class_accuracy"], parsed2["per_class_accuracy"]);

    // transport-plan export writes K x N csv/pgm pairs for a 3x3 grid
    let plans = dir.path().join("plans");
    let out = run(&[
        "inspect-plan",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--image-index",
        "1",
        "--out-dir",
        plans.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let mut csvs = 0;
    let mut pgms = 0;
    for entry in std::fs::read_dir(&plans).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(name.starts_with("img1_class"));
        if name.ends_with(".csv") {
            csvs += 1;
        } else if name.ends_with(".pgm") {
            pgms += 1;
        }
    }
    assert_eq!(csvs, 3 * 2);
    assert_eq!(pgms, 3 * 2);

    // class filter narrows the export
    let filtered = dir.path().join("plans_c1");
    let out = run(&[
        "inspect-plan",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--image-index",
        "0",
        "--class",
        "1",
        "--out-dir",
        filtered.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(&filtered).unwrap().count(), 2 * 2);
}

#[test]
fn single_prompt_transport_matches_baseline_through_cli() {
    // On a single-local-feature dataset the transport head with one prompt
    // and the cosine baseline train identically.
    let dir = tempfile::tempdir().unwrap();
    let data = gen_with_m(dir.path(), "m1.plotfs", 1);
    let plot_model = dir.path().join("plot.json");
    let coop_model = dir.path().join("coop.json");
    let common = [
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "6",
        "--batch-size",
        "6",
        "--seed",
        "3",
    ];
    let mut args = vec!["train", "--method", "plot", "--n-prompts", "1", "--out", plot_model.to_str().unwrap()];
    args.extend_from_slice(&common);
    let plot_out = run(&args);
    assert!(plot_out.status.success(), "{plot_out:?}");
    let mut args = vec!["train", "--method", "coop", "--out", coop_model.to_str().unwrap()];
    args.extend_from_slice(&common);
    let coop_out = run(&args);
    assert!(coop_out.status.success(), "{coop_out:?}");

    let losses = |text: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| l.starts_with("epoch "))
            .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
            .collect()
    };
    let plot_losses = losses(&stdout(&plot_out));
    let coop_losses = losses(&stdout(&coop_out));
    assert_eq!(plot_losses.len(), coop_losses.len());
    for (p, c) in plot_losses.iter().zip(&coop_losses) {
        assert!((p - c).abs() < 1e-8, "losses diverged: {p} vs {c}");
    }
}

#[test]
fn missing_files_exit_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        dir.path().join("nope.plotfs").to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    let data = gen_small(dir.path(), "d.plotfs");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn negative_lambda_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.plotfs");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
        "--lambda=-1",
    ]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn untrained_model_evaluates_at_chance_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    // noise-dominated features: no label signal, so the binomial bound holds
    let data = dir.path().join("noise.plotfs");
    let out = run(&[
        "gen",
        "--classes",
        "5",
        "--test",
        "100",
        "--sigma",
        "4.0",
        "--seed",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let ds = load_dataset(&data).unwrap();
    let untrained = init_model(
        ds.n_classes,
        ds.feat_dim(),
        &TrainConfig {
            seed: 12,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let model = dir.path().join("untrained.json");
    save_model(&untrained, &model).unwrap();
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let first = stdout(&out);
    let acc: f64 = first
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let band = 3.0 * (0.2_f64 * 0.8 / 500.0).sqrt();
    assert!((acc - 0.2).abs() <= band, "accuracy {acc} outside chance band");
}

#[test]
fn coop_model_cannot_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.plotfs");
    let ds = load_dataset(&data).unwrap();
    let model_state = init_model(
        ds.n_classes,
        ds.feat_dim(),
        &TrainConfig {
            method: Method::new(MethodKind::Coop),
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let model = dir.path().join("coop.json");
    save_model(&model_state, &model).unwrap();
    let out = run(&[
        "inspect-plan",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn oracle_check_gap_grows_with_lambda() {
    let json_of = |lambda: &str| -> serde_json::Value {
        let out = run(&[
            "oracle-check",
            "--rows",
            "4",
            "--cols",
            "4",
            "--trials",
            "40",
            "--lambda",
            lambda,
            "--seed",
            "7",
        ]);
        assert!(out.status.success(), "{out:?}");
        serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap()
    };
    let small = json_of("0.01");
    let large = json_of("0.1");
    let gap_small = small["mean_abs_gap"].as_f64().unwrap();
    let gap_large = large["mean_abs_gap"].as_f64().unwrap();
    assert!(gap_small <= 0.05);
    assert!(
        gap_large > gap_small,
        "mean gap should grow with lambda: {gap_small} vs {gap_large}"
    );
}

#[test]
fn oracle_check_rejects_large_instances() {
    let out = run(&["oracle-check", "--rows", "10", "--cols", "7"]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn grad_check_passes_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.plotfs");
    let model = dir.path().join("m.json");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "3",
        "--n-prompts",
        "2",
    ]);
    assert!(out.status.success());
    let out = run(&[
        "grad-check",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--image-index",
        "2",
        "--batch-size",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(stdout(&out).contains("max relative error"));
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"classes": 4, "shots": 3, "test": 2, "m": 4, "dim": 8, "seed": 9}"#)
        .unwrap();
    let with_cfg = dir.path().join("a.plotfs");
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        with_cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let ds = load_dataset(&with_cfg).unwrap();
    assert_eq!(ds.n_classes, 4);
    assert_eq!(ds.m_locals(), 4);

    // flag beats the file value
    let overridden = dir.path().join("b.plotfs");
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--classes",
        "2",
        "--out",
        overridden.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(load_dataset(&overridden).unwrap().n_classes, 2);

    // unknown keys are rejected before any work
    std::fs::write(&cfg, r#"{"classez": 4}"#).unwrap();
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("c.plotfs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn ablate_emits_the_full_table_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let base = [
        "ablate",
        "--classes",
        "3",
        "--attributes",
        "2",
        "--shots",
        "3",
        "--test",
        "3",
        "--m",
        "4",
        "--dim",
        "8",
        "--epochs",
        "2",
        "--seeds",
        "0,1",
    ];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", csv_a.to_str().unwrap()]);
    let out = run_in(dir.path(), &args);
    assert!(out.status.success(), "{out:?}");

    // parallel run produces the identical table
    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", csv_b.to_str().unwrap()]);
    let out = plot_bin()
        .current_dir(dir.path())
        .env("PLOT_THREADS", "3")
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    assert_eq!(
        std::fs::read_to_string(&csv_a).unwrap(),
        std::fs::read_to_string(&csv_b).unwrap()
    );

    let table = std::fs::read_to_string(&csv_a).unwrap();
    let settings: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        settings,
        vec!["PLOT", "CoOp", "G", "G+V", "G+E", "M", "M+V", "N=1", "N=2", "N=4", "N=8"]
    );
    // the default-N prompt-count row reuses the method-table run
    let lines: Vec<&str> = table.lines().skip(1).collect();
    let plot_row: Vec<&str> = lines[0].split(',').collect();
    let n4_row: Vec<&str> = lines[9].split(',').collect();
    assert_eq!(plot_row[4], n4_row[4], "mean accuracy should match");
}
