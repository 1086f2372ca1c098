//! Exit codes and verb behavior of the `attnpipe` binary.

use std::process::Command;

fn attnpipe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnpipe"))
}

fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let out_dir = dir.join("out");
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            r#"
seed = 3
k = 4
layers = 1

[model.custom]
layers = 1
hidden = 16
heads = 2

[workload]
count = 6

[workload.source.uniform]
lo = 8
hi = 16

[output]
dir = "{}"
"#,
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_then_gantt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let output = attnpipe().arg("run").arg(&config).output().unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("speedup vs padded"));

    let trace = dir.path().join("out/trace_length_aware.txt");
    let svg = dir.path().join("regenerated.svg");
    let output = attnpipe()
        .arg("gantt")
        .arg(&trace)
        .arg(&svg)
        .output()
        .unwrap();
    assert!(output.status.success());
    let rendered = std::fs::read_to_string(&svg).unwrap();
    assert!(rendered.starts_with("<svg"));
    // regenerating from the written trace matches the run's own diagram
    let original = std::fs::read_to_string(dir.path().join("out/gantt_length_aware.svg")).unwrap();
    assert_eq!(rendered, original);
}

#[test]
fn allocate_prints_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let output = attnpipe().arg("allocate").arg(&config).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("stage 0"));
    assert!(stdout.contains("q_proj"));
}

#[test]
fn bench_attention_reports_reduction() {
    let output = attnpipe()
        .args(["bench-attention", "--n", "32", "--d", "8", "--k", "8"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("exact-MAC reduction"));
}

#[test]
fn missing_config_fails_with_diagnostic() {
    let output = attnpipe()
        .args(["run", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("nonexistent.toml"), "{stderr}");
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "modle = \"bert-base\"\n").unwrap();
    let output = attnpipe().arg("run").arg(&path).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("modle"), "{stderr}");
}

#[test]
fn gantt_rejects_missing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let output = attnpipe()
        .arg("gantt")
        .arg(dir.path().join("missing.txt"))
        .arg(dir.path().join("out.svg"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(!dir.path().join("out.svg").exists());
}

#[test]
fn seed_override_changes_the_workload() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = attnpipe()
        .arg("run")
        .arg(&config)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    let b = attnpipe()
        .arg("run")
        .arg(&config)
        .args(["--seed", "2"])
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}
