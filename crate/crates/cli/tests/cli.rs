use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use pko_core::experiment::{Benchmark, ExperimentConfig};
use pko_core::lifting::{build_dictionary, DictionarySpec};
use pko_core::synthesis::{verify_certificate, Certificate};
use pko_core::KoopmanModel;

fn pko(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pko")).args(args).output().expect("run pko")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json()).unwrap();
    path
}

#[test]
fn shipped_configs_match_the_presets() {
    for (file, b) in [("configs/vdp.json", Benchmark::Vdp), ("configs/arm.json", Benchmark::Arm)] {
        let loaded = ExperimentConfig::load(&repo_file(file)).unwrap();
        assert_eq!(loaded, ExperimentConfig::preset(b), "{file}");
    }
}

#[test]
fn fit_then_synth_writes_a_verifiable_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = pko(&["fit", "--out", d, "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model_path = dir.path().join("model.json");
    let model = KoopmanModel::load(&model_path).unwrap();
    assert_eq!(model.r(), 15);
    let out = pko(&["synth", "--model", model_path.to_str().unwrap(), "--out", d, "--lambda-grid", "0.01,1000,13"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cert = Certificate::load(&dir.path().join("cert.json")).unwrap();
    verify_certificate(&cert, &cert.problem(&model).unwrap()).unwrap();
    assert!(cert.solver.wall_time_s.is_none());
}

#[test]
fn synth_reports_infeasibility_with_exit_code_2() {
    let dictionary = build_dictionary(&DictionarySpec::preset("vdp15")).unwrap();
    let r = dictionary.total_dim();
    // the last coordinate grows and never reaches the output
    let mut a = -DMatrix::identity(r, r);
    a[(r - 1, r - 1)] = 1.0;
    let c_o = dictionary.output_matrix(&[0]).unwrap();
    let model = KoopmanModel {
        dictionary,
        a,
        b: DMatrix::zeros(r, 1),
        c_o,
        measured: vec![0],
        ridge_lambda: 0.0,
        residual: None,
        omega_max: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let out = pko(&["synth", "--model", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("cert.json").exists());
}

#[test]
fn usage_and_config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&pko(&["bench", "pendulum", "--out", d])), 1);
    assert_eq!(code(&pko(&["synth", "--lambda-grid", "1,2", "--out", d])), 1);
    assert_eq!(code(&pko(&["frobnicate"])), 1);
    let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::preset(Benchmark::Vdp).to_json()).unwrap();
    v["trails"] = serde_json::json!(3);
    let path = dir.path().join("typo.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = pko(&["fit", "--config", path.to_str().unwrap(), "--out", d]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trails"));
    let arm = write_config(dir.path(), &ExperimentConfig::preset(Benchmark::Arm));
    assert_eq!(code(&pko(&["bench", "vdp", "--config", arm.to_str().unwrap(), "--out", d])), 1);
    assert_eq!(code(&pko(&["--help"])), 0);
}

#[test]
fn simulate_writes_one_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = pko(&["simulate", "--config", repo_file("configs/arm.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,y1,y_noisy1");
    assert_eq!(lines.count(), 501);
}

#[test]
fn bench_writes_the_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = pko(&["bench", "vdp", "--trials", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["config.json", "model.json", "cert.json", "trials.csv", "summary.csv", "report.txt", "traces/trial_42.csv", "traces/trial_43.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn divergence_dominated_bench_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::preset(Benchmark::Vdp);
    config.trials = 2;
    // estimates start so far out that the cubic terms overflow
    config.evaluation.init_offset = 1e9;
    let path = write_config(dir.path(), &config);
    let out_dir = dir.path().join("out");
    let out = pko(&["bench", "vdp", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let trials = std::fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert!(trials.contains(",true"));
}

#[test]
fn sweep_writes_one_row_per_point_and_observer() {
    let dir = tempfile::tempdir().unwrap();
    let out = pko(&["sweep-epsilon", "--trials", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epsilon,observer,rmse_mean,rmse_std,theorem2_bound,steady_max_error,diverged");
    assert_eq!(csv.lines().count(), 31);
}
