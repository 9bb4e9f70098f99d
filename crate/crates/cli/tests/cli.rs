use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn nbscreen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbscreen"))
        .args(args)
        .env_remove("NBSCREEN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nbscreen(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = nbscreen(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line.trim()).unwrap()
}

const TWO_GROUPS: &str = "y,l,x\n12,1e4,0\n30,1.2e4,0\n7,9e3,0\n40,1e4,1\n55,1.1e4,1\n61,9.5e3,1\n";

#[test]
fn estimate_identical_groups_with_mom() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(&dir.path().join("p.csv"), "y,l,x\n5,1,0\n9,1,0\n5,1,1\n9,1,1\n");
    let v = json(&ok(&["estimate", "--method", "mom", "--input", &input]));
    assert_eq!(v["method"], "mom");
    assert_eq!(v["beta_hat"], 0.0);
    assert_eq!(v["p_value"], 1.0);
    assert_eq!(v["converged"], true);
    for key in ["mu_hat", "phi_hat", "se_beta", "z", "iterations"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn estimate_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(&dir.path().join("p.csv"), TWO_GROUPS);
    let a = ok(&["estimate", "--method", "mle", "--input", &input]);
    let b = ok(&["estimate", "--method", "mle", "--input", &input]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1);
    let v = json(&a);
    assert!(v["beta_hat"].as_f64().unwrap() > 0.5);
    assert!(v["p_value"].as_f64().unwrap() < 0.05);
}

#[test]
fn transformer_without_weights_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(&dir.path().join("p.csv"), TWO_GROUPS);
    let out = nbscreen(&["estimate", "--method", "transformer", "--input", &input]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--weights"));
    let err = fail(&["bench", "accuracy", "--n", "5", "--methods", "mom,transformer"]);
    assert!(err.contains("--weights"), "{err}");
}

#[test]
fn invalid_input_fails_naming_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = write(&dir.path().join("z.csv"), "y,l,x\n0,1,0\n0,1,0\n4,1,1\n6,1,1\n");
    let err = fail(&["estimate", "--method", "mom", "--input", &zeros]);
    assert!(err.contains("control"), "{err}");
    let bad = write(&dir.path().join("b.csv"), "y,l,x\n1,1,0\n2,x,1\n");
    let err = fail(&["estimate", "--method", "mle", "--input", &bad]);
    assert!(err.contains("`l`") && err.contains("line 3"), "{err}");
    fail(&["estimate", "--method", "mom", "--input", &bad, "--bogus"]);
    fail(&["estimate", "--method", "newton", "--input", &bad]);
}

#[test]
fn bench_accuracy_writes_one_row_per_problem_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("acc");
    let stdout = ok(&["bench", "accuracy", "--n", "100", "--design", "3v3", "--methods", "mom,mle", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("rmse_beta"));
    let csv = read(&out.join("accuracy.csv"));
    assert_eq!(csv.lines().count(), 1 + 200);
    assert!(csv.starts_with("problem_id,method,mu_true,beta_true,alpha_true,mu_hat,beta_hat,alpha_hat,converged,runtime_ns\n"));
    let manifest = json(&read(&out.join("manifest.json")));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["experiment"], "accuracy");
    assert_eq!(manifest["methods"]["methods"], serde_json::json!(["mom", "mle"]));
}

#[test]
fn bench_power_table_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pow");
    ok(&["bench", "power", "--designs", "3v3", "--betas", "0,2.5", "--n", "50", "--seed", "1", "--out", out.to_str().unwrap()]);
    let csv = read(&out.join("power.csv"));
    assert_eq!(csv.lines().count(), 1 + 2 * 1 * 2);
    assert!(csv.lines().nth(2).unwrap().starts_with("mom,3v3,2.5,50,"));
}

#[test]
fn generated_seed_is_recorded_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["bench", "calibration", "--n", "80", "--out", a.to_str().unwrap()]);
    let manifest = a.join("manifest.json");
    assert!(json(&read(&manifest))["seed"].is_u64());
    ok(&["bench", "calibration", "--from-manifest", manifest.to_str().unwrap(), "--threads", "1", "--out", b.to_str().unwrap()]);
    for f in ["calibration.csv", "calibration_summary.csv", "manifest.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let err = fail(&["bench", "power", "--from-manifest", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(err.contains("calibration"), "{err}");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_nbscreen"))
        .args(["bench", "calibration", "--n", "10", "--methods", "mom", "--out", out.to_str().unwrap()])
        .env("NBSCREEN_SEED", "987")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(json(&read(&out.join("manifest.json")))["seed"], 987);
}

#[test]
fn train_plot_and_transformer_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("tiny.toml"),
        "[model]\nd = 8\nh = 2\nL = 1\n\n[train]\nn_epoch_problems = 250\nepochs = 2\nvalidation_size = 100\n",
    );
    let w1 = dir.path().join("one/w.nbtf");
    let start = Instant::now();
    ok(&["train", "--config", &cfg, "--seed", "11", "--threads", "1", "--out", w1.to_str().unwrap()]);
    assert!(start.elapsed() < Duration::from_secs(60));
    let log = read(&dir.path().join("one/w_log.csv"));
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_loss,lr");
    assert_eq!(log.lines().count(), 1 + 2);

    // the same seed single-threaded, and a replay from the manifest, reproduce the run
    let w2 = dir.path().join("two/w.nbtf");
    ok(&["train", "--config", &cfg, "--seed", "11", "--threads", "1", "--out", w2.to_str().unwrap()]);
    let w3 = dir.path().join("three/w.nbtf");
    let manifest = dir.path().join("one/w_manifest.json");
    ok(&["train", "--from-manifest", manifest.to_str().unwrap(), "--threads", "1", "--out", w3.to_str().unwrap()]);
    for other in [&w2, &w3] {
        assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(other).unwrap());
        assert_eq!(log, read(&other.with_file_name("w_log.csv")));
    }

    let input = write(&dir.path().join("p.csv"), TWO_GROUPS);
    let v = json(&ok(&["estimate", "--method", "transformer", "--weights", w1.to_str().unwrap(), "--input", &input]));
    assert_eq!(v["method"], "transformer");
    assert!(v["phi_hat"].as_f64().unwrap() > 0.0);

    let acc = dir.path().join("acc");
    ok(&[
        "bench", "accuracy", "--n", "40", "--methods", "mom,transformer", "--weights", w1.to_str().unwrap(), "--seed", "2",
        "--out", acc.to_str().unwrap(),
    ]);
    let rows = read(&acc.join("accuracy.csv"));
    assert_eq!(rows.lines().filter(|l| l.contains(",transformer,")).count(), 40);
    let m = json(&read(&acc.join("manifest.json")));
    assert_eq!(m["methods"]["weights"]["checksum"].as_str().unwrap().len(), 16);

    let svg = dir.path().join("acc.svg");
    ok(&["plot", "--experiment", "accuracy", "--in", acc.join("accuracy.csv").to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(read(&svg).starts_with("<svg"));
}

#[test]
fn plots_are_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal");
    ok(&["bench", "calibration", "--n", "60", "--seed", "4", "--out", out.to_str().unwrap()]);
    let csv = out.join("calibration.csv");
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    ok(&["plot", "--experiment", "calibration", "--in", csv.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(&["plot", "--experiment", "calibration", "--in", csv.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(read(&a).contains("rejection_rate_0.05"));

    let empty = write(&dir.path().join("empty.csv"), "method,rank,p_value,expected_quantile\n");
    let target = dir.path().join("never.svg");
    fail(&["plot", "--experiment", "calibration", "--in", &empty, "--out", target.to_str().unwrap()]);
    assert!(!target.exists());
    let err = fail(&["plot", "--experiment", "power", "--in", csv.to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert!(err.contains("missing column `design`"), "{err}");
}
