mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use assl::output::Manifest;

fn assl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_assl"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn write_config(dir: &Path, cfg: &assl::experiment::ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Every file under `root`, keyed by relative path. The manifest's
/// volatile block is dropped.
fn contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&path).unwrap();
            if rel == "manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("volatile");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

fn run_into(config: &Path, out: &Path) {
    let status = assl()
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config();
    cfg.out_dir = "out".into();
    let config = write_config(tmp.path(), &cfg);
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let cwd = tmp.path().join(name);
        fs::create_dir(&cwd).unwrap();
        let status = assl().current_dir(&cwd).args(["run", "--config"]).arg(&config).status().unwrap();
        assert!(status.success());
        dirs.push(cwd.join("out"));
    }
    let (ca, cb) = (contents(&dirs[0]), contents(&dirs[1]));
    assert!(ca.len() > 10);
    assert_eq!(ca.keys().collect::<Vec<_>>(), cb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ca {
        assert!(bytes == &cb[name], "{name} differs");
    }
}

#[test]
fn analyze_rebuilds_the_same_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &common::small_config());
    let out = tmp.path().join("run");
    run_into(&config, &out);
    let tables = [
        "ti_profile.csv",
        "ti_correlation.csv",
        "spearman_series.csv",
        "pseudo_ratio.csv",
        "pairwise_matrix.csv",
    ];
    let before: Vec<Vec<u8>> = tables.iter().map(|t| fs::read(out.join(t)).unwrap()).collect();
    for t in &tables {
        fs::remove_file(out.join(t)).unwrap();
    }
    let status = assl().args(["analyze", "--in"]).arg(&out).status().unwrap();
    assert!(status.success());
    for (t, old) in tables.iter().zip(&before) {
        assert!(&fs::read(out.join(t)).unwrap() == old, "{t} differs after re-analysis");
    }
}

#[test]
fn manifest_can_drive_a_rerun_and_seed_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config();
    cfg.rounds = 1;
    cfg.seeds = vec![1, 2];
    let config = write_config(tmp.path(), &cfg);
    let first = tmp.path().join("first");
    run_into(&config, &first);

    let manifest = Manifest::load(&first.join("manifest.json")).unwrap();
    assert_eq!(manifest.seeds, vec![1, 2]);
    assert_eq!(manifest.runs.len(), 2 * cfg.strategies.len());
    assert!(manifest.runs.iter().all(|r| r.error.is_none() && r.rounds_completed == 1));

    let second = tmp.path().join("second");
    let status = assl()
        .args(["run", "--seed", "2", "--config"])
        .arg(first.join("manifest.json"))
        .arg("--out")
        .arg(&second)
        .status()
        .unwrap();
    assert!(status.success());
    let rounds = fs::read_to_string(second.join("rounds.csv")).unwrap();
    let mut seeds: Vec<&str> = rounds.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    seeds.dedup();
    assert_eq!(seeds, vec!["2"]);

    // seed 2 rows match between the two runs
    let old = fs::read_to_string(first.join("rounds.csv")).unwrap();
    let old2: Vec<&str> = old.lines().filter(|l| l.split(',').nth(2) == Some("2")).collect();
    let new2: Vec<&str> = rounds.lines().skip(1).collect();
    assert_eq!(old2, new2);
}

#[test]
fn invalid_config_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config();
    cfg.tracker.alpha = 1.5;
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("never");
    let result = assl().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).output().unwrap();
    assert!(!result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("config"));
    assert!(!out.exists());

    fs::write(&config, r#"{"rounds": 2, "no_such_field": 1}"#).unwrap();
    let result = assl().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(!result.status.success());
}

#[test]
fn gradcheck_command_reports_small_errors() {
    let result = assl().args(["gradcheck", "--instances", "5", "--seed", "11"]).output().unwrap();
    assert!(result.status.success());
    let text = String::from_utf8_lossy(&result.stdout);
    let last = text.lines().last().unwrap();
    let worst: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-6, "{last}");
}
