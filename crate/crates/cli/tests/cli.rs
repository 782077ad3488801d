//! End-to-end runs of the `cardiofed` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const MINIMAL: &str = "\
[experiment]
seed = 3
protocol = kfold
folds = 2

[cohort]
n_patients = 200
n_sites = 2

[federation]
rounds = 5
local_epochs = 1
batch_size = 32

[eval]
mc_passes = 10
shapley_patients = 2
";

fn cardiofed(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardiofed"))
        .args(args)
        .env("CARDIOFED_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn artifact_dir(stdout: &[u8]) -> PathBuf {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find_map(|l| l.strip_prefix("artifacts = ")).expect("artifact line");
    PathBuf::from(line)
}

#[test]
fn minimal_run_writes_every_artifact_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let cfg = cfg.to_str().unwrap();
    let start = Instant::now();
    let out = cardiofed(tmp.path(), &["run", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let dir = artifact_dir(&out.stdout);
    assert!(dir.starts_with(tmp.path()));
    let names = ["config.txt", "metrics.json", "metrics.txt", "reliability.csv", "round_log.tsv", "checkpoint.txt"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect();

    let csv = String::from_utf8(first[3].clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);
    let json = String::from_utf8(first[1].clone()).unwrap();
    assert!(json.contains("\"epsilon\": null"));

    let again = cardiofed(tmp.path(), &["run", cfg]);
    assert!(again.status.success());
    let second: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect();
    assert_eq!(first, second);

    let report = cardiofed(tmp.path(), &["report", dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("protocol = kfold"));
}

#[test]
fn single_fold_is_rejected_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &MINIMAL.replace("folds = 2", "folds = 1"));
    let out = cardiofed(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn unknown_keys_and_bad_overrides_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{MINIMAL}bogus = 1\n"));
    assert!(!cardiofed(tmp.path(), &["run", cfg.to_str().unwrap()]).status.success());
    let cfg = write_config(tmp.path(), MINIMAL);
    let out = cardiofed(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "federation.lr=abc"]);
    assert!(!out.status.success());
}

#[test]
fn ablation_table_has_baseline_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &MINIMAL.replace("protocol = kfold", "protocol = holdout"));
    let out = cardiofed(tmp.path(), &["ablate", cfg.to_str().unwrap(), "--drop", "ecg,genomics"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = artifact_dir(&out.stdout);
    let tsv = std::fs::read_to_string(dir.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("full\t") && rows[0].ends_with("\tbaseline"));
    assert!(dir.join("ablation.json").exists());
}

#[test]
fn overrides_change_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let a = cardiofed(tmp.path(), &["run", cfg.to_str().unwrap()]);
    let b = cardiofed(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "experiment.seed=4"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(artifact_dir(&a.stdout), artifact_dir(&b.stdout));
}
