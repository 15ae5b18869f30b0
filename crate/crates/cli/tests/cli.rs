//! End-to-end tests of the binary: exit codes, JSON-lines stdout, the
//! fixture/init/generate/run/analyze flow, and resume.

use std::path::Path;
use std::process::{Command, Output};

use selfpref::types::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfpref"))
}

fn run_ok(args: &[&str], cwd: &Path) -> Output {
    let output = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(
        output.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stdout_json_lines(output: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&output.stdout)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("stdout line is JSON"))
        .collect()
}

fn write_fixture(dir: &Path) {
    run_ok(
        &["fixture", "--out", dir.to_str().unwrap(), "--seed", "42"],
        dir.parent().unwrap(),
    );
}

#[test]
fn fixture_init_generate_run_analyze_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config = fx.join("config.json");

    // init writes a snapshot and a manifest stub.
    let out_dir = tmp.path().join("lab");
    let output = run_ok(
        &[
            "init",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["event"], "init_complete");
    assert!(out_dir.join("init/policy.snapshot").exists());

    // generate iteration 1 against the init snapshot.
    let output = run_ok(
        &[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--iteration",
            "1",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["event"], "dataset_written");
    assert!(lines[0]["pairs_written"].as_u64().unwrap() > 0);
    assert_eq!(lines[0]["rejected_score"], 3);

    // full run into a fresh directory.
    let run_dir = tmp.path().join("run1");
    let output = run_ok(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["event"], "run_complete");
    assert_eq!(lines[0]["iterations"], 3);
    let manifest = RunManifest::load(&run_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.iterations.len(), 3);
    assert_eq!(manifest.master_seed, 42);

    // analyze: trend has one row per iteration, sweep has ten.
    let manifest_arg = run_dir.join("manifest.json");
    run_ok(
        &[
            "analyze",
            "--manifest",
            manifest_arg.to_str().unwrap(),
            "--which",
            "trend",
        ],
        tmp.path(),
    );
    let trend = std::fs::read_to_string(run_dir.join("analysis/trend.csv")).unwrap();
    assert_eq!(trend.lines().count(), 4);

    run_ok(
        &[
            "analyze",
            "--manifest",
            manifest_arg.to_str().unwrap(),
            "--which",
            "sweep",
        ],
        tmp.path(),
    );
    let sweep = std::fs::read_to_string(run_dir.join("analysis/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 11);
}

#[test]
fn missing_input_file_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    std::fs::remove_file(fx.join("sft.json")).unwrap();
    let output = bin()
        .args(["run", "--config", fx.join("config.json").to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("sft.json"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config_path = fx.join("config.json");
    let mut raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    raw["betaa"] = serde_json::json!(0.2);
    std::fs::write(&config_path, serde_json::to_string_pretty(&raw).unwrap()).unwrap();
    let output = bin()
        .args(["run", "--config", config_path.to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("betaa"));
}

#[test]
fn zero_iterations_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config_path = fx.join("config.json");
    let mut raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    raw["iterations"] = serde_json::json!(0);
    raw["schedule"] = serde_json::json!([]);
    raw["learning_rates"] = serde_json::json!([]);
    std::fs::write(&config_path, serde_json::to_string_pretty(&raw).unwrap()).unwrap();
    let output = bin()
        .args(["run", "--config", config_path.to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn generate_without_reference_snapshot_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let output = bin()
        .args([
            "generate",
            "--config",
            fx.join("config.json").to_str().unwrap(),
            "--iteration",
            "1",
            "--out",
            empty.to_str().unwrap(),
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("policy.snapshot"));
}

#[test]
fn resume_continues_an_interrupted_run_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config = fx.join("config.json");

    let full = tmp.path().join("full");
    run_ok(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            full.to_str().unwrap(),
        ],
        tmp.path(),
    );

    // Second run, then fake an interruption after iteration 1.
    let partial = tmp.path().join("partial");
    run_ok(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            partial.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let mut manifest = RunManifest::load(&partial.join("manifest.json")).unwrap();
    manifest.iterations.truncate(1);
    manifest.save(&partial.join("manifest.json")).unwrap();
    std::fs::remove_dir_all(partial.join("iter2")).unwrap();
    std::fs::remove_dir_all(partial.join("iter3")).unwrap();

    let output = run_ok(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            partial.to_str().unwrap(),
            "--resume",
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["resumed"], true);

    assert_eq!(
        std::fs::read(full.join("manifest.json")).unwrap(),
        std::fs::read(partial.join("manifest.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("metrics.csv")).unwrap(),
        std::fs::read(partial.join("metrics.csv")).unwrap()
    );
    for iter in 1..=3 {
        let rel = format!("iter{iter}/dataset.jsonl");
        assert_eq!(
            std::fs::read(full.join(&rel)).unwrap(),
            std::fs::read(partial.join(&rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn analyze_ablation_and_prefix_eval_produce_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config_path = fx.join("config.json");

    // Shrink the seed set so the paired ablation runs stay quick.
    let mut raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    raw["analysis"]["seeds"] = serde_json::json!(2);
    std::fs::write(&config_path, serde_json::to_string_pretty(&raw).unwrap()).unwrap();

    // Fixed-schedule arm: identical config except the schedule.
    let mut fixed = raw.clone();
    fixed["schedule"] = serde_json::json!([3, 3, 3]);
    let config2_path = fx.join("config2.json");
    std::fs::write(&config2_path, serde_json::to_string_pretty(&fixed).unwrap()).unwrap();

    let run_dir = tmp.path().join("run");
    run_ok(
        &[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let manifest_arg = run_dir.join("manifest.json");

    let output = run_ok(
        &[
            "analyze",
            "--manifest",
            manifest_arg.to_str().unwrap(),
            "--which",
            "ablation",
            "--config2",
            config2_path.to_str().unwrap(),
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["which"], "ablation");
    let ablation = std::fs::read_to_string(run_dir.join("analysis/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 3, "header + 2 seed rows");
    assert!(lines[0]["win_fraction"].as_f64().unwrap() >= 0.0);

    let output = run_ok(
        &[
            "analyze",
            "--manifest",
            manifest_arg.to_str().unwrap(),
            "--which",
            "prefix-eval",
        ],
        tmp.path(),
    );
    let lines = stdout_json_lines(&output);
    assert_eq!(lines[0]["which"], "prefix-eval");
    let eval = std::fs::read_to_string(run_dir.join("analysis/prefix_eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2, "header + 1 row");
}

#[test]
fn run_with_http_backend_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    write_fixture(&fx);
    let config_path = fx.join("config.json");
    let mut raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    raw["backend"] = serde_json::json!({
        "kind": "http",
        "endpoint": "http://127.0.0.1:9",
        "model": "m",
        "auth_env": "SELFPREF_CLI_TEST_TOKEN"
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&raw).unwrap()).unwrap();
    let output = bin()
        .args(["run", "--config", config_path.to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn stdout_is_json_lines_only() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    let output = run_ok(
        &["fixture", "--out", fx.to_str().unwrap()],
        tmp.path(),
    );
    for line in String::from_utf8_lossy(&output.stdout).lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("non-JSON stdout line");
    }
}
