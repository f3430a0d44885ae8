//! End-to-end checks of the compiled binary: the one-shot pipeline, the
//! stage-by-stage equivalent, failure exit codes, and F-metric arithmetic.

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn zooaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zooaug"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_synthetic_csv(path: &Path) {
    let mut text = String::from("timestamp,ch0,ch1\n");
    for t in 0..400 {
        let phase = t as f64 * 0.07;
        let _ = writeln!(
            text,
            "{t},{:.6},{:.6}",
            phase.sin() + 0.3 * (phase * 2.3).cos(),
            (phase * 1.3).cos()
        );
    }
    std::fs::write(path, text).unwrap();
}

fn write_config(dir: &Path) -> String {
    let csv = dir.join("series.csv");
    write_synthetic_csv(&csv);
    let config = format!(
        r#"
seed = 1
[data]
path = "{}"
train = 240
val = 80
test = 80
mode = "fewshot"
fewshot_fraction = 0.25
[windows]
lookback = 8
horizon = 8
[forecaster]
epochs = 3
[zoo]
k = 3
[vmae]
d_z = 4
d_u = 8
hidden = 8
epochs = 2
batch = 16
[reinforce]
steps = 2
batch = 4
"#,
        csv.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path.display().to_string()
}

#[test]
fn pipeline_command_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("original"));
    assert!(text.contains("augmented"));
    assert!(text.contains("promotion"));
    for artifact in [
        "manifest.json",
        "metrics.csv",
        "rank.csv",
        "reward_trace.csv",
        "corpus.jsonl",
        "policy_a.json",
        "policy_b.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn stage_by_stage_matches_the_one_shot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let staged = dir.path().join("staged");
    let staged_str = staged.to_str().unwrap().to_string();
    for command in [
        "ingest", "zoo", "rank", "stage-a", "stage-b", "augment", "stage-c", "evaluate",
    ] {
        let result = zooaug(&[command, "--config", &config, "--out", &staged_str]);
        assert!(
            result.status.success(),
            "{command} failed: {}",
            stderr(&result)
        );
    }

    let oneshot = dir.path().join("oneshot");
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        oneshot.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));

    for artifact in ["metrics.csv", "corpus.jsonl", "policy_b.json", "rank.csv"] {
        let a = std::fs::read(staged.join(artifact)).unwrap();
        let b = std::fs::read(oneshot.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between staged and one-shot runs");
    }
}

#[test]
fn seeds_flag_runs_one_pipeline_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("multi");
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "3,4",
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    assert!(out.join("seed_3/manifest.json").exists());
    assert!(out.join("seed_4/manifest.json").exists());
    let text = stdout(&result);
    assert!(text.contains("--- seed 3 ---"));
    assert!(text.contains("--- seed 4 ---"));
}

#[test]
fn invalid_config_exits_nonzero_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("bad");
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--k",
        "1",
    ]);
    assert!(!result.status.success());
    assert!(stderr(&result).contains("k >= 2"));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("short");
    // Test split too short for any window: ingest fails, exit is nonzero,
    // and stderr carries the stage name.
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--test",
        "10",
    ]);
    assert!(!result.status.success());
    assert!(stderr(&result).contains("failed in stage: ingest"));
}

#[test]
fn f_metric_from_raw_numbers() {
    let result = zooaug(&[
        "f-metric",
        "--few-mae",
        "0.434",
        "--aug-mae",
        "0.422",
        "--std-mae",
        "0.405",
        "--few-mse",
        "0.411",
        "--aug-mse",
        "0.403",
        "--std-mse",
        "0.387",
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("f_mae 41.4%"), "got: {text}");
    assert!(text.contains("f_mse 33.3%"), "got: {text}");
}

#[test]
fn f_metric_from_manifests_and_group_ab() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let few_out = dir.path().join("few");
    let std_out = dir.path().join("std");
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        few_out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let result = zooaug(&[
        "pipeline",
        "--config",
        &config,
        "--out",
        std_out.to_str().unwrap(),
        "--mode",
        "standard",
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let few_manifest = few_out.join("manifest.json");
    let std_manifest = std_out.join("manifest.json");
    let result = zooaug(&[
        "f-metric",
        "--fewshot",
        few_manifest.to_str().unwrap(),
        "--standard",
        std_manifest.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    assert!(stdout(&result).contains("f_mae"));

    let ab_out = dir.path().join("ab");
    let result = zooaug(&[
        "group-ab",
        "--config",
        &config,
        "--out",
        ab_out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("group_a"));
    assert!(text.contains("group_b"));
    assert!(ab_out.join("group_ab.csv").exists());
}

#[test]
fn ablations_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let rl_out = dir.path().join("rl");
    let result = zooaug(&[
        "ablate-rl",
        "--config",
        &config,
        "--out",
        rl_out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("rl"));
    assert!(text.contains("no_rl"));
    assert!(rl_out.join("ablation_rl.json").exists());

    let anchor_out = dir.path().join("anchor");
    let result = zooaug(&[
        "ablate-anchor",
        "--config",
        &config,
        "--out",
        anchor_out.to_str().unwrap(),
        "--fractions",
        "0.3,1.0",
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    assert!(stdout(&result).contains("1.00"));
    assert!(anchor_out.join("ablation_anchor.json").exists());
}
