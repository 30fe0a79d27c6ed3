//! End-to-end checks of the `coordsim` binary.

use std::path::Path;
use std::process::{Command, Output};

fn coordsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coordsim"))
        .args(args)
        .env("COORDSIM_OUT", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "steps_per_epoch=20",
    "--set",
    "checkpoint_every=1",
    "--set",
    "eval_window=1",
];

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--study", "regularity", "--size", "60", "--epochs", "3", "--seeds", "1"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    coordsim(&args, out)
}

#[test]
fn unknown_timepoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = coordsim(
        &["export", "--from", "x", "--game", "market", "--timepoint", "wave3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for allowed in ["initial", "wave2", "wave5"] {
        assert!(err.contains(allowed), "{err}");
    }
}

#[test]
fn validate_config_fills_defaults_and_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = coordsim(&["validate-config", "--set", "size=100"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("size = 100"), "{text}");
    assert!(text.contains("gamma = 0.9"), "{text}");

    let o = coordsim(&["validate-config", "--set", "size=50"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = coordsim(&["validate-config", "--set", "no_such_key=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = small_run(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = small_run(dir.path(), &["--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn run_resume_probe_export_and_generational() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = small_run(root, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed = root.join("regularity").join("seed-1");
    for f in ["config.toml", "session.ckpt", "training.csv", "manifest.csv", "tidy.csv"] {
        assert!(seed.join(f).is_file(), "missing {f}");
    }
    assert!(seed.join("checkpoints/epoch-00002.ckpt").is_file());
    assert!(root.join("regularity/tidy.csv").is_file());

    let o = coordsim(&["resume", "--from", seed.to_str().unwrap()], root);
    assert!(o.status.success());
    assert!(stdout(&o).contains("already complete"));

    // Resume from an earlier checkpoint reproduces the same final state.
    let finished = std::fs::read(seed.join("session.ckpt")).unwrap();
    let finished_log = std::fs::read_to_string(seed.join("training.csv")).unwrap();
    std::fs::copy(seed.join("checkpoints/epoch-00001.ckpt"), seed.join("session.ckpt")).unwrap();
    let o = coordsim(&["resume", "--from", seed.to_str().unwrap()], root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(seed.join("session.ckpt")).unwrap(), finished);
    assert_eq!(std::fs::read_to_string(seed.join("training.csv")).unwrap(), finished_log);

    let o = coordsim(&["probe", "--from", seed.to_str().unwrap()], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("group\tprobes"));
    assert_eq!(table.lines().count(), 4);

    let json = root.join("agent.json");
    let o = coordsim(
        &[
            "export", "--from", seed.to_str().unwrap(), "--game", "agent", "--timepoint", "initial",
            "--epochs", "3", "--out", json.to_str().unwrap(),
        ],
        root,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);

    // A regularity-only session has no wave-5 timepoint.
    let o = coordsim(&["export", "--from", seed.to_str().unwrap(), "--game", "market"], root);
    assert_eq!(o.status.code(), Some(1));

    let mut args = vec![
        "run", "--study", "generational", "--from", root.to_str().unwrap(), "--seeds", "1",
        "--set", "replacement.inter_wave_epochs=1", "--set", "replacement.post_market_epochs=1",
    ];
    args.extend_from_slice(SMALL);
    let o = coordsim(&args, root);
    assert!(o.status.success(), "{}", stderr(&o));
    let generational = root.join("generational").join("seed-1");
    let o = coordsim(
        &["export", "--from", generational.to_str().unwrap(), "--game", "market", "--timepoint", "wave5"],
        root,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["agents"].as_array().unwrap().len(), 60);
}

#[test]
fn generational_without_source_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = coordsim(&["run", "--study", "generational", "--size", "60"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--from"));
}
