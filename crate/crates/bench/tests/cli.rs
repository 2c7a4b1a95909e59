use std::path::Path;
use std::process::{Command, Output};

fn tubeil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubeil"))
        .args(args)
        .env("TUBEIL_OUTPUT_ROOT", dir)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn tube_writes_artifact_and_prints_box() {
    let dir = tempfile::tempdir().unwrap();
    let o = tubeil(dir.path(), &["-o", "run", "tube"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("z[")).count(), 8);
    let run = dir.path().join("run");
    let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("artifacts/tube.json")).unwrap()).unwrap();
    assert!(art["tube"]["z_box"].is_object());
    assert_eq!(art["config_hash"].as_str().unwrap().len(), 64);
    assert!(run.join("config.toml").exists());
}

#[test]
fn train_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = tubeil(dir.path(), &["-o", "run", "--set", "il.epochs=3", "--set", "il.n_demos=2", "train"]);
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("run");
    for k in 1..=2 {
        assert!(run.join(format!("checkpoints/policy_demo_{k:02}.json")).exists());
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("results/train.json")).unwrap()).unwrap();
    assert_eq!(report["checkpoints"].as_array().unwrap().len(), 2);
    assert_eq!(report["checkpoints"][1]["dataset_size"], 2 * 70 * 17);
    assert_eq!(report["method"], "bc+sa_sparse");

    let ck = run.join("checkpoints/policy_demo_02.json");
    let o = tubeil(dir.path(), &["-o", "run", "--set", "eval.episodes=2", "eval", "--checkpoint", ck.to_str().unwrap(), "--domain", "source"]);
    assert!(o.status.success(), "{o:?}");
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("results/eval_policy_demo_02_source.json")).unwrap()).unwrap();
    assert_eq!(ev["episodes"], 2);
    assert!(run.join("episodes/policy_demo_02_source_001.csv").exists());
}

#[test]
fn expert_eval_on_default_task() {
    let dir = tempfile::tempdir().unwrap();
    let o = tubeil(dir.path(), &["-o", "run", "--set", "eval.episodes=2", "eval", "--expert"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("expert on target_T1: success 1.00"), "{}", stdout(&o));
}

#[test]
fn corrupt_checkpoint_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"something-else\"}").unwrap();
    let o = tubeil(dir.path(), &["-o", "run", "eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    for args in [
        vec!["-c", missing.to_str().unwrap(), "tube"],
        vec!["--set", "il.epochs=0", "train"],
        vec!["--set", "eval.methods=[\"ppo+none\"]", "compare"],
        vec!["--set", "il.no_such_key=1", "train"],
        vec!["eval"],
        vec!["frobnicate"],
    ] {
        let o = tubeil(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {o:?}");
    }
}

#[test]
fn config_file_and_overrides_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "master_seed = 9\n[il]\nmethod = \"dagger\"\nepochs = 4\n").unwrap();
    let o = tubeil(dir.path(), &["-c", path.to_str().unwrap(), "--set", "il.epochs=6", "config"]);
    assert!(o.status.success(), "{o:?}");
    let resolved = stdout(&o);
    assert!(resolved.contains("master_seed = 9"));
    assert!(resolved.contains("epochs = 6"));
    assert!(resolved.contains("method = \"dagger\""));
}

#[test]
fn compare_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = tubeil(
        dir.path(),
        &[
            "-o",
            "run",
            "--workers",
            "2",
            "--set",
            "eval.methods=[\"bc+sa_sparse\"]",
            "--set",
            "eval.seeds=1",
            "--set",
            "eval.n_demos_max=2",
            "--set",
            "eval.episodes=2",
            "--set",
            "il.epochs=5",
            "compare",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("run/results");
    let csv = std::fs::read_to_string(run.join("compare.csv")).unwrap();
    // header plus 2 demonstration counts in 2 domains
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(run.join("compare_summary.json").exists());
}
