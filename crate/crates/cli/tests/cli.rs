use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcgp_core::synthetic::BlockModel;
use serde_json::Value;
use tempfile::TempDir;

fn gcgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcgp"))
        .args(args)
        .env_remove("GCGP_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("toy");
        BlockModel {
            n: 240,
            d: 40,
            classes: 3,
            avg_degree: 4.0,
            homophily: 0.8,
            words_per_node: 6,
            signal: 0.5,
            train_per_class: 8,
            val: 30,
            test: 90,
            seed: 3,
        }
        .generate()
        .save(&data)
        .unwrap();
        Self { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> &str {
        self.data.to_str().unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const RUN: &[&str] = &["--per-class", "2", "--k", "2", "--beta", "0.5", "--no-learn-structure", "--epochs", "15"];

#[test]
fn condense_writes_artifacts_with_embedded_config() {
    let fx = Fixture::new();
    let out = fx.path("run");
    let mut args = vec!["condense", "--dataset", fx.data(), "--seed", "4", "--out", s(&out)];
    args.extend_from_slice(RUN);
    let res = gcgp(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("test accuracy"));

    for f in ["condensed.json", "metrics.json", "report.json", "effective.conf"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = json(&out.join("metrics.json"));
    let acc = metrics["accuracy_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(metrics["condensed_nodes"], 6);
    assert_eq!(metrics["num_test"], 90);
    for doc in [&metrics, &json(&out.join("report.json")), &json(&out.join("condensed.json"))] {
        let cfg = &doc["config"];
        assert_eq!(cfg["seed"], 4);
        assert_eq!(cfg["run"]["condense"]["beta"], 0.5);
        assert_eq!(cfg["run"]["condense"]["feature_scale"], "auto");
        assert!(cfg["feature_scale_resolved"].as_f64().unwrap() > 0.0);
    }
    let condensed = json(&out.join("condensed.json"));
    assert_eq!(condensed["X_s"].as_array().unwrap().len(), 6);
    assert_eq!(condensed["learn_structure"], false);
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let fx = Fixture::new();
    let out = fx.path("never");
    let missing = fx.path("no-such-dataset");
    let res = gcgp(&["condense", "--dataset", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("does not exist"), "{}", stderr(&res));
    assert!(!out.exists());
}

#[test]
fn zero_epochs_dumps_the_initialization() {
    let fx = Fixture::new();
    let out = fx.path("init");
    let res = gcgp(&["condense", "--dataset", fx.data(), "--per-class", "2", "--epochs", "0", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = json(&out.join("report.json"));
    assert_eq!(report["runs"][0]["steps_run"], 0);
    assert!(report["runs"][0]["loss_history"].as_array().unwrap().is_empty());
    let condensed = json(&out.join("condensed.json"));
    assert_eq!(condensed["provenance"]["source_nodes"].as_array().unwrap().len(), 6);
    // labels stay one-hot when nothing was optimized
    for row in condensed["Y_s"].as_array().unwrap() {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn flags_override_the_config_file() {
    let fx = Fixture::new();
    let conf = fx.path("run.conf");
    let out = fx.path("prec");
    fs::write(
        &conf,
        format!("# shared settings\ndataset = {}\nbeta = 2.0\nepochs = 5\nper_class = 2\n", fx.data()),
    )
    .unwrap();
    let res = gcgp(&["condense", "--config", s(&conf), "--beta", "0.25", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let effective = fs::read_to_string(out.join("effective.conf")).unwrap();
    assert!(effective.contains("beta = 0.25"), "{effective}");
    assert!(effective.contains("epochs = 5"), "{effective}");
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["config"]["run"]["condense"]["beta"], 0.25);
    assert_eq!(metrics["config"]["run"]["condense"]["epochs"], 5);

    // the written config reproduces the run
    let again = fx.path("again");
    let res = gcgp(&["condense", "--config", s(&out.join("effective.conf")), "--out", s(&again)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(
        json(&again.join("metrics.json"))["accuracy_mean"],
        metrics["accuracy_mean"]
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let fx = Fixture::new();
    let conf = fx.path("bad.conf");
    fs::write(&conf, "betta = 0.5\n").unwrap();
    let res = gcgp(&["condense", "--config", s(&conf), "--dataset", fx.data(), "--out", s(&fx.path("x"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("unknown config key `betta`"), "{}", stderr(&res));
}

#[test]
fn malformed_values_are_validation_errors() {
    let fx = Fixture::new();
    let out = fx.path("x");
    for bad in [
        &["--beta", "-1"][..],
        &["--kernel", "rbf"],
        &["--feature-scale", "huge"],
        &["--optimizer", "lbfgs"],
    ] {
        let mut args = vec!["condense", "--dataset", fx.data(), "--out", s(&out)];
        args.extend_from_slice(bad);
        assert_eq!(code(&gcgp(&args)), 2, "{bad:?}");
    }
    // clap's own usage errors share the code
    assert_eq!(code(&gcgp(&["condense", "--beta", "abc"])), 2);
    assert_eq!(code(&gcgp(&["condense", "--size", "3", "--per-class", "1"])), 2);
}

#[test]
fn single_cell_sweep_matches_condense() {
    let fx = Fixture::new();
    let run = fx.path("run");
    let mut args = vec!["condense", "--dataset", fx.data(), "--out", s(&run)];
    args.extend_from_slice(RUN);
    assert_eq!(code(&gcgp(&args)), 0);
    let acc = json(&run.join("metrics.json"))["accuracy_mean"].as_f64().unwrap();

    let sw = fx.path("sweep");
    let mut args = vec!["sweep", "--dataset", fx.data(), "--out", s(&sw), "--betas", "0.5", "--ks", "2", "--jobs", "2"];
    args.extend_from_slice(RUN);
    let res = gcgp(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let cells = json(&sw.join("sweep.json"))["cells"].clone();
    assert_eq!(cells.as_array().unwrap().len(), 1);
    assert_eq!(cells[0]["acc_mean"].as_f64().unwrap(), acc);
    let csv = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("beta,k,acc_mean,acc_std\n0.5,2,"), "{csv}");
}

#[test]
fn sweep_grid_keeps_order_and_is_deterministic() {
    let fx = Fixture::new();
    let run = |name: &str, jobs: &str| {
        let out = fx.path(name);
        let res = gcgp(&[
            "sweep", "--dataset", fx.data(), "--out", s(&out), "--betas", "0.1,1", "--ks", "1,2", "--jobs", jobs,
            "--per-class", "2", "--epochs", "5",
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let one = run("a", "1");
    let four = run("b", "4");
    assert_eq!(one, four);
    let keys: Vec<String> = one.lines().skip(1).map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["0.1,1", "0.1,2", "1,1", "1,2"]);
}

#[test]
fn evaluate_reproduces_condense_accuracy() {
    let fx = Fixture::new();
    let run = fx.path("run");
    let mut args = vec!["condense", "--dataset", fx.data(), "--out", s(&run)];
    args.extend_from_slice(RUN);
    assert_eq!(code(&gcgp(&args)), 0);
    let acc = json(&run.join("metrics.json"))["accuracy_mean"].clone();
    let condensed = run.join("condensed.json");

    let res = gcgp(&["evaluate", "--condensed", s(&condensed)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let doc: Value = serde_json::from_str(&stdout(&res)).unwrap();
    assert_eq!(doc["result"]["accuracy_mean"], acc);

    for target in ["krr", "sgc"] {
        let out = fx.path(target);
        let res = gcgp(&["evaluate", "--condensed", s(&condensed), "--target", target, "--out", s(&out)]);
        assert_eq!(code(&res), 0, "{target}: {}", stderr(&res));
        assert_eq!(json(&out.join("metrics.json"))["target"], target);
    }
    assert_eq!(code(&gcgp(&["evaluate", "--condensed", s(&condensed), "--target", "gcn"])), 2);
    assert_eq!(code(&gcgp(&["evaluate", "--condensed", s(&fx.path("nope.json"))])), 2);
}

#[test]
fn baselines_are_reported_next_to_the_condensed_result() {
    let fx = Fixture::new();
    let out = fx.path("run");
    let mut args = vec!["condense", "--dataset", fx.data(), "--out", s(&out), "--baselines", "--seeds", "2"];
    args.extend_from_slice(RUN);
    let res = gcgp(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["accuracies"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["random"]["accuracies"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["kcenter"]["accuracies"].as_array().unwrap().len(), 2);
    assert!(out.join("condensed-seed1.json").is_file());
}

#[test]
fn published_columns_are_labelled() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("cora");
    BlockModel {
        n: 300,
        d: 30,
        classes: 7,
        train_per_class: 5,
        val: 20,
        test: 50,
        ..BlockModel::default()
    }
    .generate()
    .save(&data)
    .unwrap();
    let out = dir.path().join("run");
    let res = gcgp(&["condense", "--dataset", s(&data), "--size", "35", "--epochs", "2", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["published"]["label"], "published, not recomputed");
    assert_eq!(metrics["published"]["row"]["size"], 35);
}

#[test]
fn bench_writes_timing_table() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench");
    let res = gcgp(&[
        "bench", "--synthetic-n", "300", "--synthetic-d", "16", "--sizes", "4,8,16", "--steps", "2", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = fs::read_to_string(out.join("timing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,step_ms");
    assert_eq!(lines.len(), 4);
    let report = json(&out.join("timing.json"));
    assert_eq!(report["report"]["n"], 300);
    assert!(report["report"]["loglog_slope"].is_number());
}

#[test]
fn gradcheck_passes_in_both_modes() {
    for extra in [&[][..], &["--learn-structure"]] {
        let mut args = vec!["gradcheck", "--n", "20", "--m", "6", "--d", "8", "--classes", "3", "--seed", "1"];
        args.extend_from_slice(extra);
        let res = gcgp(&args);
        assert_eq!(code(&res), 0, "{extra:?}: {}{}", stdout(&res), stderr(&res));
        assert!(stdout(&res).contains("max relative error"));
    }
}

#[test]
fn gradcheck_reports_failure_with_exit_one() {
    // a step this large makes central differences visibly inexact
    let res = gcgp(&["gradcheck", "--step", "1e-3", "--rel-tol", "1e-12", "--abs-floor", "0"]);
    assert_eq!(code(&res), 1, "{}", stdout(&res));
}

#[test]
fn kernel_oracle_exit_codes() {
    let ok = gcgp(&["kernel-oracle", "--pairs", "10", "--samples", "200000"]);
    assert_eq!(code(&ok), 0, "{}{}", stdout(&ok), stderr(&ok));
    assert!(stdout(&ok).contains("max |analytic - Monte-Carlo|"));
    let strict = gcgp(&["kernel-oracle", "--pairs", "10", "--samples", "1000", "--tolerance", "1e-9"]);
    assert_eq!(code(&strict), 1);
    assert_eq!(code(&gcgp(&["kernel-oracle", "--dims", "0"])), 2);
}

#[test]
fn numerical_failure_exits_three() {
    let fx = Fixture::new();
    let res = gcgp(&[
        "condense", "--dataset", fx.data(), "--out", s(&fx.path("boom")), "--per-class", "2", "--optimizer", "sgd",
        "--lr", "1e300", "--epochs", "5",
    ]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).contains("non-finite"), "{}", stderr(&res));
}

#[test]
fn thread_cap_must_be_positive() {
    let res = Command::new(env!("CARGO_BIN_EXE_gcgp"))
        .args(["gradcheck", "--n", "4", "--m", "2", "--d", "2", "--classes", "2"])
        .env("GCGP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&res), 2);
    let res = Command::new(env!("CARGO_BIN_EXE_gcgp"))
        .args(["gradcheck", "--n", "4", "--m", "2", "--d", "2", "--classes", "2"])
        .env("GCGP_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}
