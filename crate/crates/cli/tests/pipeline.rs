use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[scenario]
kind = "spread"
n_per_side = 1
horizon = 25

[score]
epochs = 2
hidden = 16

[train]
num_envs = 2
rollout_steps = 25
minibatches = 2
ppo_epochs = 1
phase1_steps = 100
phase3_steps = 100

[train.iw]
max_epochs = 5
patience = 2

[eval]
episodes = 24
steps = 20
"#;

fn iatt(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_iatt"))
        .current_dir(dir)
        .arg("--config")
        .arg("run.toml")
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "iatt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_pipeline_on_a_tiny_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();

    iatt(
        dir,
        &[
            "train-gf",
            "--kind",
            "entity",
            "--samples",
            "300",
            "--out",
            "entity.iatt",
        ],
    );
    iatt(
        dir,
        &[
            "train-gf",
            "--kind",
            "boundary",
            "--samples",
            "300",
            "--out",
            "boundary.iatt",
        ],
    );
    let fields = [
        "--entity-field",
        "entity.iatt",
        "--boundary-field",
        "boundary.iatt",
    ];

    let mut args = vec!["train", "--variant", "self-att", "--out", "sa"];
    args.extend(fields);
    iatt(dir, &args);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("sa/manifest.json")).unwrap()).unwrap();
    let pairs = manifest["pairs"].as_array().unwrap();
    assert!(!pairs.is_empty());
    let pair_path = format!("sa/{}", pairs[0].as_str().unwrap());
    let metrics = std::fs::read_to_string(dir.join("sa/metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 1);

    iatt(
        dir,
        &[
            "train-iw", "--pairs", &pair_path, "--role", "agent", "--out", "iw.iatt",
        ],
    );
    assert!(dir.join("iw.report.json").exists());

    let mut args = vec![
        "train",
        "--variant",
        "inverse-att",
        "--from",
        "sa",
        "--iw",
        "iw.iatt",
        "--out",
        "ia",
    ];
    args.extend(fields);
    iatt(dir, &args);

    let mut args = vec!["train", "--variant", "mapo", "--steps", "50", "--out", "mp"];
    args.extend(fields);
    iatt(dir, &args);

    let mut args = vec![
        "eval",
        "tournament",
        "--entry",
        "self_att=sa/policy-0.iatt",
        "--entry",
        "inverse_att=ia/policy-0.iatt",
        "--entry",
        "mappo=mp/policy-0.iatt",
        "--random",
        "agent",
        "--out",
        "tournament.jsonl",
    ];
    args.extend(fields);
    let out = iatt(dir, &args);
    let table = String::from_utf8(out.stdout).unwrap();
    for m in ["self_att", "inverse_att", "mappo", "random"] {
        assert!(table.contains(m), "{m} missing from\n{table}");
    }
    let report = std::fs::read_to_string(dir.join("tournament.jsonl")).unwrap();
    let episodes = report
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["record"] == "episode")
        .count();
    assert_eq!(episodes, 24);

    let out = iatt(
        dir,
        &["eval", "rank-acc", "--iw", "iw.iatt", "--pairs", &pair_path],
    );
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("rank-1 accuracy"));

    let mut args = vec![
        "eval",
        "partial-obs",
        "--entry",
        "self_att=sa/policy-0.iatt",
        "--random",
        "agent",
        "--radii",
        "1.0,0.5",
    ];
    args.extend(fields);
    iatt(dir, &args);
}

#[test]
fn misspelled_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "[train]\nphase1_stepz = 5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_iatt"))
        .current_dir(tmp.path())
        .args([
            "--config", "run.toml", "train-gf", "--kind", "entity", "--out", "x.iatt",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase1_stepz"));
}

#[test]
fn inverse_att_requires_a_source_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_iatt"))
        .current_dir(tmp.path())
        .args(["train", "--variant", "inverse-att", "--out", "ia"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--from"));
}
