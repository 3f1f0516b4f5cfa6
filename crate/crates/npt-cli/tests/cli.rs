//! End-to-end checks of the binary: every subcommand run against real
//! files in a temp dir, with exit codes and artifacts inspected.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn npt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_npt"))
}

fn run(args: &[&str]) -> Output {
    npt().args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, variant: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth_{variant}_{seed}"));
    let status = run(&[
        "synth",
        "--variant",
        variant,
        "--n",
        &n.to_string(),
        "--features",
        "5",
        "--seed",
        &seed.to_string(),
        "--out",
        path_str(&out),
    ]);
    assert_exit(&status, 0);
    out
}

fn write_config(dir: &Path, steps: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("config_{seed}.json"));
    std::fs::write(
        &path,
        format!(r#"{{"layers": 2, "heads": 2, "e": 8, "steps": {steps}, "lr": 0.003, "seed": {seed}}}"#),
    )
    .unwrap();
    path
}

fn train(dir: &Path, data_dir: &Path, config: &Path, tag: &str) -> PathBuf {
    let out = dir.join(format!("run_{tag}"));
    let status = run(&[
        "train",
        "--config",
        path_str(config),
        "--data",
        path_str(&data_dir.join("data.csv")),
        "--schema",
        path_str(&data_dir.join("schema.json")),
        "--roles",
        path_str(&data_dir.join("roles.json")),
        "--out",
        path_str(&out),
    ]);
    assert_exit(&status, 0);
    out
}

#[test]
fn synth_writes_the_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), "plain", 50, 3);
    let csv = std::fs::read_to_string(out.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101, "header plus 2n rows");
    assert!(out.join("schema.json").exists());
    let roles: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("roles.json")).unwrap()).unwrap();
    assert_eq!(roles["roles"].as_array().unwrap().len(), 100);
    assert_eq!(roles["pair"][0], serde_json::json!(50));
}

#[test]
fn synth_is_deterministic_and_add_one_shifts_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "plain", 30, 7);
    let b = synth(dir.path(), "plain", 30, 8);
    let c_dir = dir.path().join("repeat");
    let status = run(&[
        "synth", "--variant", "plain", "--n", "30", "--features", "5", "--seed", "7", "--out",
        path_str(&c_dir),
    ]);
    assert_exit(&status, 0);
    let bytes_a = std::fs::read(a.join("data.csv")).unwrap();
    let bytes_b = std::fs::read(b.join("data.csv")).unwrap();
    let bytes_c = std::fs::read(c_dir.join("data.csv")).unwrap();
    assert_eq!(bytes_a, bytes_c, "same seed, same file");
    assert_ne!(bytes_a, bytes_b, "different seed, different file");

    let shifted = synth(dir.path(), "add_one", 30, 7);
    let text = std::fs::read_to_string(shifted.join("data.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    for i in 0..30 {
        let orig: f64 = rows[i].split(',').last().unwrap().parse().unwrap();
        let dup: f64 = rows[i + 30].split(',').last().unwrap().parse().unwrap();
        assert!(
            (dup - orig - 1.0).abs() < 1e-12,
            "row {i}: duplicate target {dup} vs original {orig}"
        );
    }
}

#[test]
fn train_smoke_run_improves_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "plain", 40, 11);
    let config = write_config(dir.path(), 40, 5);
    let out = train(dir.path(), &data, &config, "smoke");

    assert!(out.join("checkpoint.nptc").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> =
        metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 40);
    let vals: Vec<f64> = rows
        .iter()
        .filter_map(|r| r["val_target_loss"].as_f64())
        .collect();
    assert!(
        vals.last().unwrap() < vals.first().unwrap(),
        "val loss should drop: {} -> {}",
        vals.first().unwrap(),
        vals.last().unwrap()
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert!(eval["test"]["rmse_std"].as_f64().unwrap().is_finite());
}

#[test]
fn same_seed_trains_byte_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "plain", 30, 2);
    let config = write_config(dir.path(), 15, 9);
    let a = train(dir.path(), &data, &config, "a");
    let b = train(dir.path(), &data, &config, "b");
    let bytes_a = std::fs::read(a.join("checkpoint.nptc")).unwrap();
    let bytes_b = std::fs::read(b.join("checkpoint.nptc")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "plain", 20, 1);
    let config = write_config(dir.path(), 5, 1);

    let out = run(&[
        "train",
        "--config",
        path_str(&config),
        "--data",
        path_str(&data.join("data.csv")),
        "--schema",
        path_str(&dir.path().join("missing_schema.json")),
        "--out",
        path_str(&dir.path().join("x")),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing_schema.json"), "{stderr}");

    let bad = dir.path().join("bad_config.json");
    std::fs::write(&bad, r#"{"layers": 2, "heads": 2, "e": 8, "steps": 5, "banana": 1}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        path_str(&bad),
        "--data",
        path_str(&data.join("data.csv")),
        "--schema",
        path_str(&data.join("schema.json")),
        "--out",
        path_str(&dir.path().join("y")),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("banana"));
}

#[test]
fn probes_run_against_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "plain", 40, 13);
    let config = write_config(dir.path(), 30, 3);
    let run_dir = train(dir.path(), &data, &config, "probe");
    let ckpt = run_dir.join("checkpoint.nptc");

    let base = |mode: &str, out: &Path| {
        vec![
            "probe".to_string(),
            "--checkpoint".to_string(),
            path_str(&ckpt).to_string(),
            "--data".to_string(),
            path_str(&data.join("data.csv")).to_string(),
            "--schema".to_string(),
            path_str(&data.join("schema.json")).to_string(),
            "--roles".to_string(),
            path_str(&data.join("roles.json")).to_string(),
            "--mode".to_string(),
            mode.to_string(),
            "--out".to_string(),
            path_str(out).to_string(),
        ]
    };

    let eq_out = dir.path().join("probe_eq");
    let args = base("equivariance", &eq_out);
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eq_out.join("report.json")).unwrap())
            .unwrap();
    let dev = report["equivariance_max_dev"].as_f64().unwrap();
    assert!(dev <= 1e-4, "32-bit equivariance deviation {dev}");

    let cor_out = dir.path().join("probe_cor");
    let args = base("corrupt", &cor_out);
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cor_out.join("report.json")).unwrap())
            .unwrap();
    assert!(report["clean_metric"].as_f64().unwrap().is_finite());
    assert!(report["corrupted_metric"].as_f64().unwrap().is_finite());
    let delta = report["delta"].as_f64().unwrap();
    let diff = report["corrupted_metric"].as_f64().unwrap()
        - report["clean_metric"].as_f64().unwrap();
    assert!((delta - diff).abs() < 1e-12, "delta must be corrupted minus clean");

    let att_out = dir.path().join("probe_att");
    let args = base("attention", &att_out);
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_exit(&out, 0);
    let files: Vec<_> = std::fs::read_dir(&att_out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("attention_"))
        .collect();
    assert_eq!(files.len(), 4, "2 layers x 2 heads: {files:?}");
    let text = std::fs::read_to_string(att_out.join("attention_l0_h0.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("batch,row,k0,"));
    for line in lines {
        let sum: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "attention row sums to {sum}");
    }
}

#[test]
fn probe_rejects_a_mismatched_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "plain", 30, 4);
    let config = write_config(dir.path(), 10, 4);
    let run_dir = train(dir.path(), &data, &config, "mismatch");

    let other = synth(dir.path(), "plain", 30, 5);
    let mut schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(other.join("schema.json")).unwrap())
            .unwrap();
    schema["columns"][0]["name"] = serde_json::json!("renamed");
    let bad_schema = dir.path().join("bad_schema.json");
    std::fs::write(&bad_schema, schema.to_string()).unwrap();

    let out = run(&[
        "probe",
        "--checkpoint",
        path_str(&run_dir.join("checkpoint.nptc")),
        "--data",
        path_str(&data.join("data.csv")),
        "--schema",
        path_str(&bad_schema),
        "--roles",
        path_str(&data.join("roles.json")),
        "--mode",
        "corrupt",
        "--out",
        path_str(&dir.path().join("probe_bad")),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn gradcheck_passes_and_the_break_hook_fails() {
    let out = run(&["gradcheck"]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("full_npt_loss"));
    assert!(stdout.lines().filter(|l| l.contains("PASS")).count() >= 20);
    assert!(!stdout.contains("FAIL"));

    let out = npt()
        .args(["gradcheck"])
        .env("NPT_GRADCHECK_BREAK", "1.02")
        .output()
        .unwrap();
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
