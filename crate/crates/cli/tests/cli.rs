use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nld_cli::config::{
    load_config, resolve_out_dir, CompareConfig, EvolveConfig, SpectrumConfig, TrainConfig, VerifyTheoryConfig,
};
use nld_cli::report::RUN_REPORT_SCHEMA;
use nld_cli::{run, CheckStatus, Overrides, RunReport};
use serde_json::{json, Value};

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run_in(dir: &Path, command: &str, config: Value) -> anyhow::Result<RunReport> {
    let path = write_config(dir, &format!("{command}.json"), &config);
    let overrides = Overrides {
        seed: None,
        out: Some(dir.join(format!("{command}-out"))),
    };
    run(command, &path, &overrides, None)
}

fn trajectory_column(path: &Path, column: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn assert_schema_valid(report: &RunReport) {
    let schema: Value = serde_json::from_str(RUN_REPORT_SCHEMA).unwrap();
    let instance: Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(jsonschema::is_valid(&schema, &instance), "{}", report.to_json());
}

fn tiny_network(stages: Value) -> Value {
    json!({
        "input_channels": 4,
        "hidden_channels": 6,
        "trunk_blocks": 2,
        "num_classes": 2,
        "stages": stages
    })
}

fn tiny_task() -> Value {
    json!({"num_positions": 10, "num_channels": 4, "num_classes": 2, "num_samples": 24, "val_samples": 8})
}

#[test]
fn unknown_keys_are_rejected() {
    let bad = r#"{"stepper": "markov", "steps": 3, "colour": "blue"}"#;
    let err = serde_json::from_str::<EvolveConfig>(bad).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
    let bad_hyper = json!({"network": tiny_network(json!([])), "hyper": {"lr": 0.1, "nesterov": true}});
    assert!(serde_json::from_value::<TrainConfig>(bad_hyper).is_err());
}

#[test]
fn output_directory_precedence() {
    let flag = Path::new("flag");
    let cfg = Path::new("cfg");
    assert_eq!(resolve_out_dir(Some(flag), Some(cfg), Some("env")), PathBuf::from("flag"));
    assert_eq!(resolve_out_dir(None, Some(cfg), Some("env")), PathBuf::from("cfg"));
    assert_eq!(resolve_out_dir(None, None, Some("env")), PathBuf::from("env"));
    assert_eq!(resolve_out_dir(None, None, None), PathBuf::from("nld-out"));
}

#[test]
fn verify_theory_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_in(dir.path(), "verify-theory", json!({})).unwrap();
    assert!(report.passed(), "{}", report.to_json());
    for name in ["stability", "mean_preservation", "variance_decay", "decay_rate", "poincare"] {
        assert_eq!(report.check(name).unwrap().status, CheckStatus::Pass, "{name}");
    }
    assert_schema_valid(&report);
    let echoed: nld_cli::config::VerifyTheoryConfig = serde_json::from_value(report.config.clone()).unwrap();
    assert_eq!(echoed.seed, 0);
}

#[test]
fn verify_theory_negative_control_is_not_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"kernel_entries": [[0.0, 1.0], [1.0, 0.0]], "weight": 1.5, "steps": 60,
                     "initial": [[1.0], [-1.0]]});
    let report = run_in(dir.path(), "verify-theory", cfg).unwrap();
    assert_eq!(report.check("stability").unwrap().status, CheckStatus::ExpectedFail);
    assert_eq!(report.check("variance_decay").unwrap().status, CheckStatus::ExpectedFail);
    assert!(report.passed(), "{}", report.to_json());
}

#[test]
fn verify_theory_two_positions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"kernel_entries": [[0.9, 0.1], [0.1, 0.9]], "initial": [[1.0], [-1.0]], "steps": 40});
    let report = run_in(dir.path(), "verify-theory", cfg).unwrap();
    assert!(report.passed(), "{}", report.to_json());
    let rate = report.check("decay_rate").unwrap().measured.unwrap();
    assert!((rate + 0.8f64.ln()).abs() <= 1e-6 * 0.8f64.ln().abs());
    let random_m2 = run_in(dir.path(), "verify-theory", json!({"num_positions": 2})).unwrap();
    assert!(random_m2.passed(), "{}", random_m2.to_json());
}

#[test]
fn evolve_zero_weight_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_in(dir.path(), "evolve", json!({"stepper": "proposed", "weight": 0.0, "steps": 10})).unwrap();
    assert!(report.passed());
    let l2 = trajectory_column(&dir.path().join("evolve-out/trajectory.csv"), "l2");
    assert!(l2.iter().all(|&v| v == l2[0]));
}

#[test]
fn evolve_two_state_markov_decays_geometrically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"stepper": "markov", "kernel_entries": [[0.9, 0.1], [0.1, 0.9]],
                     "initial": [[1.0], [-1.0]], "num_channels": 1, "steps": 20});
    assert!(run_in(dir.path(), "evolve", cfg).unwrap().passed());
    let dist = trajectory_column(&dir.path().join("evolve-out/trajectory.csv"), "dist_to_mean");
    for (n, d) in dist.iter().enumerate() {
        let expect = 2f64.sqrt() * 0.8f64.powi(n as i32);
        assert!((d - expect).abs() <= 1e-12 * expect.max(1e-300), "step {n}: {d} vs {expect}");
    }
}

#[test]
fn evolve_original_single_position_damps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"stepper": "original", "kernel": {"variant": "gaussian"}, "weight": -0.5,
                     "initial": [[2.0]], "steps": 12});
    assert!(run_in(dir.path(), "evolve", cfg).unwrap().passed());
    let l2 = trajectory_column(&dir.path().join("evolve-out/trajectory.csv"), "l2");
    for (n, v) in l2.iter().enumerate() {
        assert!((v - 2.0 * 0.5f64.powi(n as i32)).abs() <= 1e-15);
    }
}

#[test]
fn evolve_reports_unexpected_blow_up() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"stepper": "proposed", "kernel_entries": [[0.0, 1.0], [1.0, 0.0]], "weight": 1.5,
                     "initial": [[1.0], [-1.0]], "num_channels": 1, "steps": 100});
    let report = run_in(dir.path(), "evolve", cfg.clone()).unwrap();
    assert_eq!(report.check("bounded_evolution").unwrap().status, CheckStatus::Fail);
    assert!(!report.passed());
    let mut expected = cfg;
    expected["expect_blow_up"] = json!(true);
    assert!(run_in(dir.path(), "evolve", expected).unwrap().passed());
}

#[test]
fn spectrum_of_negative_identity() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("w.csv"), "-1,0,0\n0,-1,0\n0,0,-1\n").unwrap();
    let report = run_in(dir.path(), "spectrum", json!({"matrix": "w.csv"})).unwrap();
    assert!(report.passed());
    let csv = fs::read_to_string(dir.path().join("spectrum-out/spectrum.csv")).unwrap();
    assert_eq!(csv, "index,value\n0,-1\n1,-1\n2,-1\n");
    let json: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("spectrum-out/spectrum.json")).unwrap()).unwrap();
    assert_eq!(json["classification"], "damping_dominant");
    assert_eq!(json["counts"]["negative"], 3);
}

#[test]
fn spectrum_rejects_non_square_input() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("w.csv"), "1,2,3\n4,5,6\n").unwrap();
    let err = run_in(dir.path(), "spectrum", json!({"matrix": "w.csv"})).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("2 rows") && msg.contains("3 columns"), "{msg}");
    fs::write(dir.path().join("bad.csv"), "1,x\n2,3\n").unwrap();
    assert!(run_in(dir.path(), "spectrum", json!({"matrix": "bad.csv"})).is_err());
}

#[test]
fn train_then_spectrum_of_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let stages = json!([
        {"formulation": "proposed", "sub_blocks": 2, "kernel": {"variant": "gaussian"}, "placement": 0},
        {"formulation": "original", "sub_blocks": 1, "kernel": {"variant": "dirac_delta"}, "placement": 1}
    ]);
    let cfg = json!({"task": tiny_task(), "network": tiny_network(stages),
                     "hyper": {"lr": 0.05, "epochs": 2, "batch_size": 8}});
    let report = run_in(dir.path(), "train", cfg).unwrap();
    assert!(report.passed(), "{}", report.to_json());
    assert_schema_valid(&report);
    let history = fs::read_to_string(dir.path().join("train-out/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
    assert_eq!(history.lines().count(), 3);

    let spec = run_in(
        dir.path(),
        "spectrum",
        json!({"checkpoint": "train-out/checkpoint.bin", "top_k": 4}),
    )
    .unwrap();
    let names: Vec<&str> = spec.artifacts.iter().map(String::as_str).collect();
    assert_eq!(
        names,
        [
            "stage0_sub0_spectrum.csv",
            "stage0_sub0_spectrum.json",
            "stage0_sub1_spectrum.csv",
            "stage0_sub1_spectrum.json",
            "stage1_sub0_spectrum.csv",
            "stage1_sub0_spectrum.json"
        ]
    );
    let from_train = fs::read_to_string(dir.path().join("train-out/stage1_sub0_spectrum.csv")).unwrap();
    assert_eq!(from_train.lines().count(), 7);
}

#[test]
fn zero_learning_rate_history_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let stages = json!([{"formulation": "proposed", "sub_blocks": 1, "kernel": {"variant": "gaussian"}, "placement": 0}]);
    let cfg = json!({"task": tiny_task(), "network": tiny_network(stages),
                     "hyper": {"lr": 0.0, "epochs": 3, "batch_size": 8}});
    run_in(dir.path(), "train", cfg).unwrap();
    let losses = trajectory_column(&dir.path().join("train-out/history.csv"), "train_loss");
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|&l| l == losses[0]));
}

fn compare_config(variants: Value, parallel: bool) -> Value {
    json!({"task": tiny_task(), "network": tiny_network(json!([])), "kernel": {"variant": "gaussian"},
           "placement": 0, "variants": variants, "parallel": parallel,
           "hyper": {"lr": 0.05, "epochs": 2, "batch_size": 8}})
}

#[test]
fn compare_rejects_empty_variant_set() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_in(dir.path(), "compare", compare_config(json!([]), false)).unwrap_err();
    assert!(format!("{err:#}").contains("at least one variant"));
}

#[test]
fn compare_duplicates_give_identical_rows_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let variants = json!([{"formulation": "proposed", "sub_blocks": 2}, {"formulation": "proposed", "sub_blocks": 2}]);
    run_in(dir.path(), "compare", compare_config(variants.clone(), false)).unwrap();
    let table = fs::read_to_string(dir.path().join("compare-out/compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);

    let par = tempfile::tempdir().unwrap();
    run_in(par.path(), "compare", compare_config(variants, true)).unwrap();
    assert_eq!(table, fs::read_to_string(par.path().join("compare-out/compare.csv")).unwrap());
}

#[test]
fn binary_exit_code_follows_report_status() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_config(dir.path(), "ok.json", &json!({"stepper": "markov", "steps": 5}));
    let status = Command::new(env!("CARGO_BIN_EXE_nld"))
        .args(["evolve", "--config"])
        .arg(&ok)
        .arg("--out")
        .arg(dir.path().join("a"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("a/report.json").exists());

    let failing = write_config(
        dir.path(),
        "bad.json",
        &json!({"stepper": "proposed", "kernel_entries": [[0.0, 1.0], [1.0, 0.0]], "weight": 1.5,
                "initial": [[1.0], [-1.0]], "num_channels": 1, "steps": 100}),
    );
    let status = Command::new(env!("CARGO_BIN_EXE_nld"))
        .args(["evolve", "--config"])
        .arg(&failing)
        .env("NLD_OUT", dir.path().join("env-out"))
        .status()
        .unwrap();
    assert!(!status.success());
    assert!(dir.path().join("env-out/report.json").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "v.json", &json!({"seed": 3}));
    let overrides = Overrides {
        seed: Some(7),
        out: Some(dir.path().join("o")),
    };
    let report = run("verify-theory", &path, &overrides, Some("ignored")).unwrap();
    assert_eq!(report.config["seed"], 7);
    assert_eq!(report.config["out_dir"], json!(dir.path().join("o")));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    load_config::<VerifyTheoryConfig>(&dir.join("verify_theory.json")).unwrap();
    load_config::<EvolveConfig>(&dir.join("exchange_unstable.json")).unwrap();
    load_config::<EvolveConfig>(&dir.join("original_damping.json")).unwrap();
    load_config::<TrainConfig>(&dir.join("train.json")).unwrap();
    load_config::<SpectrumConfig>(&dir.join("spectrum_checkpoint.json")).unwrap();
    load_config::<CompareConfig>(&dir.join("compare.json")).unwrap();
    let out = tempfile::tempdir().unwrap();
    for (command, file) in [
        ("verify-theory", "verify_theory.json"),
        ("evolve", "exchange_unstable.json"),
        ("evolve", "original_damping.json"),
    ] {
        let overrides = Overrides {
            seed: None,
            out: Some(out.path().join(file)),
        };
        let report = run(command, &dir.join(file), &overrides, None).unwrap();
        assert!(report.passed(), "{file}: {}", report.to_json());
    }
}
