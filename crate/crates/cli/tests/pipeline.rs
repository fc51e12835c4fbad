use std::path::Path;
use std::process::{Command, Output};

use rlvr_core::runlog::{LogRecord, RunLog};

const SMALL: &str = r#"
schema_version = 1
seed = 5

[task]
pool_size = 512
heldout_size = 64

[update]
total_steps = 60
eval_interval = 10
"#;

fn rlvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr")).args(args).output().expect("spawn rlvr")
}

fn ok(args: &[&str]) -> String {
    let out = rlvr(args);
    assert!(
        out.status.success(),
        "rlvr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("c.toml");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn prepare(dir: &Path, cfg: &str, n: &str) {
    let out = dir.to_str().unwrap();
    for cmd in ["gen-tasks", "probe", "filter"] {
        ok(&["--config", cfg, "--out", out, "--n", n, cmd]);
    }
}

#[test]
fn full_pipeline_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    prepare(dir.path(), &cfg, "8");
    for cmd in ["train", "analyze", "eval", "diversity", "faithfulness", "report"] {
        ok(&["--config", &cfg, "--out", out, "--n", "8", cmd]);
    }
    let run = "shared-n8-verifier-mean-s5";
    for f in [
        "tasks.jsonl".to_string(),
        "heldout.jsonl".into(),
        "base_policy_shared.json".into(),
        "profile_shared.jsonl".into(),
        "sample_shared_n8.jsonl".into(),
        format!("{run}.runlog.jsonl"),
        format!("{run}.policy.json"),
        format!("{run}.saturation.csv"),
        format!("{run}.eval.json"),
        format!("{run}.diversity.json"),
        format!("{run}.faithfulness.json"),
        "table.csv".into(),
        "curves_reward.svg".into(),
        "curves_heldout_avg_16.svg".into(),
    ] {
        assert!(dir.path().join(&f).exists(), "missing {f}");
    }
    let svg = std::fs::read_to_string(dir.path().join("curves_reward.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    prepare(dir.path(), &cfg, "8");
    let log = dir.path().join("shared-n8-verifier-mean-s5.runlog.jsonl");
    ok(&["--config", &cfg, "--out", out, "--n", "8", "train"]);
    let first = std::fs::read(&log).unwrap();
    ok(&["--config", &cfg, "--out", out, "--n", "8", "train"]);
    assert_eq!(first, std::fs::read(&log).unwrap());
}

#[test]
fn corrupted_and_majority_runs_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    prepare(dir.path(), &cfg, "32");
    ok(&["--config", &cfg, "--out", out, "--n", "32", "--gamma", "0.5", "corrupt"]);
    let labels = std::fs::read_to_string(dir.path().join("labels_shared_n32_g0.50.jsonl")).unwrap();
    assert_eq!(labels.lines().filter(|l| l.contains("\"corrupted\":true")).count(), 16);
    ok(&["--config", &cfg, "--out", out, "--n", "32", "--gamma", "0.5", "--reward", "corrupted", "train"]);
    ok(&["--config", &cfg, "--out", out, "--n", "32", "--reward", "majority", "--baseline", "neg", "train"]);
    assert!(dir.path().join("shared-n32-corrupted-mean-g0.50-s5.runlog.jsonl").exists());
    assert!(dir.path().join("shared-n32-majority-neg-s5.runlog.jsonl").exists());
}

#[test]
fn analyze_finds_ramp_saturation() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = RunLog::new("ramp", 8);
    for t in 0..=200usize {
        if t > 0 {
            log.push(LogRecord::Step {
                step: t,
                mean_reward: (t as f64 / 100.0).min(1.0),
                per_prompt_mean_rewards: vec![],
            });
        }
        if t % 10 == 0 {
            log.push(LogRecord::Eval {
                step: t,
                metric: "heldout/avg@16".into(),
                value: t as f64 / 400.0,
            });
        }
    }
    let path = dir.path().join("ramp.runlog.jsonl");
    log.save(&path).unwrap();
    let csv = ok(&["--out", dir.path().to_str().unwrap(), "analyze", "--log", path.to_str().unwrap()]);
    let row = csv.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[0], "ramp");
    assert_eq!(cols[2], "99");
    assert_eq!(cols[4], "100");
}

#[test]
fn missing_inputs_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = rlvr(&["--out", out, "train"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("rlvr gen-tasks"));
    ok(&["--out", out, "gen-tasks"]);
    let res = rlvr(&["--out", out, "filter"]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("rlvr probe"));
    let res = rlvr(&["--out", out, "eval"]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("rlvr train"));
}

#[test]
fn aborted_training_exits_nonzero_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = inf\n");
    let out = dir.path().to_str().unwrap();
    prepare(dir.path(), &cfg, "8");
    let res = rlvr(&["--config", &cfg, "--out", out, "--n", "8", "train"]);
    assert_eq!(res.status.code(), Some(2));
    let log = RunLog::load(&dir.path().join("shared-n8-verifier-mean-s5.runlog.jsonl")).unwrap();
    assert!(log.has_error());
}

#[test]
fn printed_config_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["--seed", "9", "--reward", "certainty", "config"]);
    let path = dir.path().join("echo.toml");
    std::fs::write(&path, &text).unwrap();
    let again = ok(&["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(text, again);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("self_certainty"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "schema_version = 7\n").unwrap();
    let res = rlvr(&["--config", path.to_str().unwrap(), "config"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("schema_version"));
}
