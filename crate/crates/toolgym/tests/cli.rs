//! Black-box tests of the `toolgym` binary: exit-code contract, the
//! serve/run/score/curriculum/advantages/taxonomy pipeline over the
//! bundled fixtures, and config-file/env-var flag layering.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toolgym"))
}

fn fixture(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(path)
}

fn stdout_lines(output: &Output) -> Vec<String> {
    String::from_utf8_lossy(&output.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

/// Mock server child that dies with the test.
struct MockChild {
    child: Child,
    endpoint: String,
}

impl MockChild {
    fn spawn() -> Self {
        let mut child = bin()
            .args([
                "serve-mock",
                "--registry",
                fixture("fixtures/registry.json").to_str().unwrap(),
                "--script",
                fixture("fixtures/mock_script.jsonl").to_str().unwrap(),
                "--port",
                "0",
            ])
            .stdout(Stdio::piped())
            .spawn()
            .expect("spawn serve-mock");
        let stdout = child.stdout.take().expect("child stdout");
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .expect("readiness line");
        let endpoint = line
            .trim()
            .strip_prefix("serving ")
            .expect("readiness prefix")
            .to_string();
        MockChild { child, endpoint }
    }
}

impl Drop for MockChild {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Copy of the fixture registry with every endpoint pointed at `endpoint`.
fn rewritten_registry(dir: &Path, endpoint: &str) -> PathBuf {
    let text = std::fs::read_to_string(fixture("fixtures/registry.json")).unwrap();
    let mut specs: serde_json::Value = serde_json::from_str(&text).unwrap();
    for spec in specs.as_array_mut().unwrap() {
        spec["endpoint"] = endpoint.into();
    }
    let path = dir.join("registry.json");
    std::fs::write(&path, serde_json::to_string_pretty(&specs).unwrap()).unwrap();
    path
}

#[test]
fn test_unknown_subcommand_is_usage_error() {
    let output = bin().arg("frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn test_missing_required_flag_is_usage_error() {
    let output = bin()
        .args(["score", "--variant", "paper"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn test_serve_mock_occupied_port_fails() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let output = bin()
        .args([
            "serve-mock",
            "--registry",
            fixture("fixtures/registry.json").to_str().unwrap(),
            "--port",
            &port.to_string(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("bind"));
}

#[test]
fn test_pipeline_run_score_curriculum_advantages_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockChild::spawn();
    let registry = rewritten_registry(dir.path(), &mock.endpoint);
    let log = dir.path().join("run.traj.jsonl");

    // run: 5 instances x G=8, exit 0 because nothing aborted.
    let output = bin()
        .args([
            "run",
            "--dataset",
            fixture("fixtures/dataset.jsonl").to_str().unwrap(),
            "--registry",
            registry.to_str().unwrap(),
            "--policy",
            fixture("fixtures/policy_script.jsonl").to_str().unwrap(),
            "--out",
            log.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_str(stdout_lines(&output).last().unwrap()).unwrap();
    assert_eq!(summary["total_episodes"], 40);
    assert_eq!(summary["aborted"], 0);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 40);
    assert!(log.with_extension("summary.json").exists());

    // score --variant paper is a fixed point on the fresh log.
    let output = bin()
        .args([
            "score",
            "--log",
            log.to_str().unwrap(),
            "--variant",
            "paper",
            "--dataset",
            fixture("fixtures/dataset.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(stdout_lines(&output).last().unwrap()).unwrap();
    assert_eq!(summary["mismatches"], 0);
    assert_eq!(summary["trajectories"], 40);

    // Difficulty variant runs and stays within the scaled range.
    let output = bin()
        .args([
            "score",
            "--log",
            log.to_str().unwrap(),
            "--variant",
            "difficulty",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));

    // curriculum over the log: the fixture pass rates put exactly three
    // instances inside the default band.
    let manifest = dir.path().join("slice.txt");
    let output = bin()
        .args([
            "curriculum",
            "--log",
            log.to_str().unwrap(),
            "--out",
            manifest.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let ids: Vec<String> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(
        ids,
        vec!["geo-circle-bad", "geo-find-xz", "geo-parallel-eg"]
    );

    // The manifest gates a filtered re-run.
    let filtered_log = dir.path().join("filtered.traj.jsonl");
    let output = bin()
        .args([
            "run",
            "--dataset",
            fixture("fixtures/dataset.jsonl").to_str().unwrap(),
            "--registry",
            registry.to_str().unwrap(),
            "--policy",
            fixture("fixtures/policy_script.jsonl").to_str().unwrap(),
            "--out",
            filtered_log.to_str().unwrap(),
            "--filter",
            manifest.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(&filtered_log)
            .unwrap()
            .lines()
            .count(),
        24
    );

    // advantages: one line per instance, zero-mean vectors.
    let output = bin()
        .args(["advantages", "--log", log.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let lines = stdout_lines(&output);
    assert_eq!(lines.len(), 5);
    for line in &lines {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let adv: Vec<f64> = value["advantages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(adv.len(), 8);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    // taxonomy-report with the registry: table rows for E1..E6.
    let output = bin()
        .args([
            "taxonomy-report",
            "--log",
            log.to_str().unwrap(),
            "--registry",
            registry.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(stdout_lines(&output).last().unwrap()).unwrap();
    assert_eq!(report["total_cases"], 40);
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn test_config_file_and_env_layering() {
    let dir = tempfile::tempdir().unwrap();
    // Synthetic rates: i0=0/8 .. i4=4/8.
    let rates = dir.path().join("rates.jsonl");
    let mut text = String::new();
    for k in 0..5u64 {
        text.push_str(&format!(
            "{{\"instance_id\":\"i{k}\",\"successes\":{k},\"rollouts\":8,\"rate\":{}}}\n",
            k as f64 / 8.0
        ));
    }
    std::fs::write(&rates, text).unwrap();

    // Config narrows the band; the default band would select i1..i3.
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"lower": 0.25, "upper": 0.375}"#).unwrap();
    let manifest = dir.path().join("slice.txt");
    let output = bin()
        .args([
            "curriculum",
            "--rates",
            rates.to_str().unwrap(),
            "--out",
            manifest.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let ids: Vec<String> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(
        ids,
        vec!["i2", "i3"],
        "config file must override the defaults"
    );

    // An explicit flag beats the config file.
    let output = bin()
        .args([
            "curriculum",
            "--rates",
            rates.to_str().unwrap(),
            "--out",
            manifest.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--lower",
            "0.125",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let ids: Vec<String> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(ids, vec!["i1", "i2", "i3"]);

    // An environment variable beats the config file too.
    let output = bin()
        .env("TOOLGYM_EPSILON", "not-a-number")
        .args(["advantages", "--log", rates.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "bad env value is a usage error"
    );
}
