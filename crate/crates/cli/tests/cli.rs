use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};
use tempfile::TempDir;

fn emgd(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_emgd"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn solve(request: Value) -> (i32, Value) {
    let out = emgd(&["solve"], Some(&request.to_string()));
    let code = out.status.code().unwrap();
    let body = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (code, body)
}

fn lambda(v: &Value) -> Vec<f64> {
    v["lambda"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn synthetic(classes: usize) -> Value {
    json!({"synthetic": {
        "classes": classes,
        "input_dim": 8,
        "noise_sigma": 0.3,
        "samples_per_class": 12,
        "test_samples_per_class": 4
    }})
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn pcl_config(dir: &Path, method: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{method}.json"));
    write_json(
        &path,
        &json!({
            "run": {
                "method": method,
                "batch_size": 8,
                "memory_batch_size": 8,
                "capacity_per_class": 4,
                "hidden": [12],
                "feature_dim": 6
            },
            "data": synthetic(6),
            "split": {"num_tasks": 2, "label_bounds": [3, 3]}
        }),
    );
    path
}

fn run_pcl(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run-pcl",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    emgd(&args, None)
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn solve_single_gradient() {
    let (code, body) = solve(json!({"grads": [[1, 0]], "sigma_mode": "fixed", "sigma": [1]}));
    assert_eq!(code, 0);
    assert_eq!(lambda(&body), vec![1.0]);
    assert_eq!(body["converged"], json!(true));
}

#[test]
fn solve_piecewise_fixture() {
    let (code, body) =
        solve(json!({"grads": [[2, 0], [1, 0]], "sigma_mode": "fixed", "sigma": [0.5, 0.5]}));
    assert_eq!(code, 0);
    let l = lambda(&body);
    assert!(l[0].abs() < 1e-12 && (l[1] - 2.0).abs() < 1e-12, "{l:?}");
}

#[test]
fn solve_input_errors_exit_one() {
    let out = emgd(
        &["solve"],
        Some(r#"{"grads": [[1, 0], [1]], "sigma_mode": "gs"}"#),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = emgd(
        &["solve"],
        Some(r#"{"grads": [[1, 0]], "sigma_mode": "gs", "temprature": 2}"#),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("temprature"));
    let out = emgd(&["solve"], Some("not json"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solve_nonconvergence_exits_two() {
    let (code, body) = solve(json!({
        "grads": [[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, -1, 0.5]],
        "sigma_mode": "fixed",
        "sigma": [1, 1, 1, 1],
        "max_iter": 1
    }));
    assert_eq!(code, 2);
    assert_eq!(body["converged"], json!(false));
}

#[test]
fn toy_defaults_and_replay() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let out = emgd(&["run-toy", "--out", dir.path().to_str().unwrap()], None);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let trace = fs::read_to_string(a.path().join("toy_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1500);
    for name in ["toy_trace.csv", "toy_summary.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}

#[test]
fn toy_iteration_override_and_bad_method() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().to_str().unwrap();
    let out = emgd(
        &[
            "run-toy", "--iters", "10", "--method", "avg_grad", "--out", path,
        ],
        None,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(dir.path().join("toy_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 10);
    let out = emgd(&["run-toy", "--method", "sgd", "--out", path], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pcl_writes_metrics_and_method_changes_lambda() {
    let dir = TempDir::new().unwrap();
    let mut logs = Vec::new();
    for method in ["emgd_gs", "avg_grad"] {
        let out_dir = dir.path().join(method);
        let out = run_pcl(&pcl_config(dir.path(), method), &out_dir, &["--seed", "5"]);
        assert!(out.status.success(), "{}", stderr(&out));
        let metrics: Value =
            serde_json::from_slice(&fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
        assert!(metrics["A_final"].is_f64() && metrics["F_final"].is_f64());
        assert!(out_dir.join("split.json").exists());
        logs.push(fs::read_to_string(out_dir.join("tick_log.csv")).unwrap());
    }
    let (gs, avg) = (column(&logs[0], "lambda"), column(&logs[1], "lambda"));
    assert_eq!(gs.len(), avg.len());
    assert_ne!(gs, avg);
}

#[test]
fn pcl_task_incremental_dominates_class_incremental() {
    let dir = TempDir::new().unwrap();
    let config = pcl_config(dir.path(), "emgd_gs");
    let mut a = Vec::new();
    for mode in ["task-incremental", "class-incremental"] {
        let out_dir = dir.path().join(mode);
        let out = run_pcl(&config, &out_dir, &["--eval-mode", mode]);
        assert!(out.status.success(), "{}", stderr(&out));
        let metrics: Value =
            serde_json::from_slice(&fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
        a.push(metrics["A_final"].as_f64().unwrap());
    }
    assert!(a[0] >= a[1], "{a:?}");
}

#[test]
fn pcl_replays_a_built_manifest() {
    let dir = TempDir::new().unwrap();
    let split_cfg = dir.path().join("splits.json");
    write_json(
        &split_cfg,
        &json!({"data": synthetic(6), "split": {"num_tasks": 2, "label_bounds": [3, 3], "batch_size": 8}, "seed": 77}),
    );
    let out = emgd(
        &[
            "build-splits",
            "--config",
            split_cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let config = dir.path().join("pcl.json");
    let run = json!({"batch_size": 8, "memory_batch_size": 8, "hidden": [12], "feature_dim": 6});
    write_json(
        &config,
        &json!({"run": run, "data": synthetic(6), "manifest": "split.json", "snapshot": true}),
    );
    let out_dir = dir.path().join("run");
    let out = run_pcl(&config, &out_dir, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(dir.path().join("split.json")).unwrap(),
        fs::read(out_dir.join("split.json")).unwrap()
    );
    for name in ["buffer.bin", "buffer.json", "network.bin"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn pcl_missing_manifest_exits_one() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("pcl.json");
    write_json(
        &config,
        &json!({"data": synthetic(6), "manifest": "nowhere.json"}),
    );
    let out = run_pcl(&config, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere.json"));
}

#[test]
fn pcl_unknown_config_key_exits_one() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("pcl.json");
    write_json(
        &config,
        &json!({"run": {"gama": 0.1}, "data": synthetic(6), "split": {"num_tasks": 2, "label_bounds": [3, 3]}}),
    );
    let out = run_pcl(&config, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gama"));
}

fn build_splits(dir: &Path, split: Value, extra: &[&str]) -> (Output, Option<Value>) {
    let cfg = dir.join("cfg.json");
    write_json(
        &cfg,
        &json!({"data": synthetic(12), "split": split, "seed": 1234}),
    );
    let mut args = vec![
        "build-splits",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = emgd(&args, None);
    let manifest = fs::read(dir.join("split.json"))
        .ok()
        .map(|b| serde_json::from_slice(&b).unwrap());
    (out, manifest)
}

fn labels(task: &Value) -> Vec<u64> {
    task["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect()
}

#[test]
fn build_splits_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let split = json!({"num_tasks": 3, "label_bounds": [2, 5]});
    let (out, _) = build_splits(a.path(), split.clone(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    build_splits(b.path(), split, &[]);
    assert_eq!(
        fs::read(a.path().join("split.json")).unwrap(),
        fs::read(b.path().join("split.json")).unwrap()
    );
}

#[test]
fn build_splits_overlap_shares_labels() {
    let dir = TempDir::new().unwrap();
    let (out, manifest) = build_splits(
        dir.path(),
        json!({"num_tasks": 3, "label_bounds": [2, 4]}),
        &["--overlap", "0.5"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tasks = manifest.unwrap()["tasks"].as_array().unwrap().clone();
    for pair in tasks.windows(2) {
        let (prev, next) = (labels(&pair[0]), labels(&pair[1]));
        let shared = next.iter().filter(|l| prev.contains(l)).count();
        let want = (0.5 * prev.len() as f64).ceil() as usize;
        assert_eq!(shared, want.min(next.len()), "{prev:?} {next:?}");
    }
}

#[test]
fn build_splits_serial_chains_windows() {
    let dir = TempDir::new().unwrap();
    let (out, manifest) = build_splits(
        dir.path(),
        json!({"num_tasks": 3, "label_bounds": [2, 4]}),
        &["--serial"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tasks = manifest.unwrap()["tasks"].as_array().unwrap().clone();
    for pair in tasks.windows(2) {
        assert_eq!(
            pair[1]["s"].as_u64().unwrap(),
            pair[0]["e"].as_u64().unwrap() + 1
        );
    }
}

#[test]
fn build_splits_infeasible_bounds_exit_one() {
    let dir = TempDir::new().unwrap();
    let (out, _) = build_splits(
        dir.path(),
        json!({"num_tasks": 3, "label_bounds": [5, 20]}),
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

fn metrics_file(path: &Path, method: &str, seed: u64, a: f64, f: f64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_json(
        path,
        &json!({
            "A_final": a,
            "F_final": f,
            "per_task": {},
            "method": method,
            "editing": "none",
            "eval_mode": "task_incremental",
            "seed": seed
        }),
    );
}

fn report(dir: &Path) -> Output {
    emgd(&["report", dir.to_str().unwrap()], None)
}

#[test]
fn report_one_file_one_row() {
    let dir = TempDir::new().unwrap();
    metrics_file(&dir.path().join("a/metrics.json"), "emgd_gs", 1, 0.8, -0.1);
    let out = report(dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.contains("0.8000 ± 0.0000"));
}

#[test]
fn report_uses_sample_standard_deviation() {
    let dir = TempDir::new().unwrap();
    for (seed, a) in [(1, 0.7), (2, 0.8), (3, 0.9)] {
        metrics_file(
            &dir.path().join(format!("s{seed}/metrics.json")),
            "emgd_gs",
            seed,
            a,
            0.0,
        );
    }
    metrics_file(
        &dir.path().join("avg/metrics.json"),
        "avg_grad",
        1,
        0.5,
        -0.2,
    );
    let out = report(dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("report_summary.csv")).unwrap();
    let row = summary.lines().find(|l| l.starts_with("emgd_gs")).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[3], "3");
    let mean: f64 = cells[4].parse().unwrap();
    let std: f64 = cells[5].parse().unwrap();
    // Spreadsheet STDEV.S of 0.7, 0.8, 0.9.
    assert!((mean - 0.8).abs() < 1e-12);
    assert!((std - 0.1).abs() < 1e-12, "{std}");
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn report_names_the_broken_file() {
    let dir = TempDir::new().unwrap();
    metrics_file(
        &dir.path().join("good/metrics.json"),
        "emgd_gs",
        1,
        0.8,
        0.0,
    );
    let bad = dir.path().join("bad/metrics.json");
    fs::create_dir_all(bad.parent().unwrap()).unwrap();
    fs::write(&bad, r#"{"A_final": 0.5, "method": "emgd_gs"}"#).unwrap();
    let out = report(dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad"), "{}", stderr(&out));
}

#[test]
fn report_empty_dir_exits_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(report(dir.path()).status.code(), Some(1));
}

#[test]
fn pcl_numeric_failure_exits_three_with_tick() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("pcl.json");
    write_json(
        &config,
        &json!({
            "run": {"gamma_heads": 1.7e308, "batch_size": 8, "memory_batch_size": 8, "hidden": [12], "feature_dim": 6},
            "data": synthetic(6),
            "split": {"num_tasks": 2, "label_bounds": [3, 3]}
        }),
    );
    let out = run_pcl(&config, &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("tick 1"), "{}", stderr(&out));
}
