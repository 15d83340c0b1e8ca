//! CLI contract tests: exit codes, artifact layout, idempotent outputs.

use std::path::Path;
use std::process::{Command, Output};

fn crowdtask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdtask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

/// Synthetic data on disk plus a config file pointing at it.
fn synthetic_fixture(dir: &Path, extra: &str) -> std::path::PathBuf {
    let spec = crowdtask::synth::SyntheticSpec {
        n_images: 48,
        image_size: 32,
        seed: 2,
        ..crowdtask::synth::SyntheticSpec::default()
    };
    let data = dir.join("data");
    crowdtask::synth::generate(&spec, &data).unwrap();
    write_config(
        dir,
        &format!(
            r#"
seed = 9

[paths]
labels = "{0}/labels.csv"
annotations = "{0}/annotations.csv"
images = "{0}/images"
output = "{1}/out"

[model]
encoder = "tiny_test"

[augmentation]
output_size = [32, 32]
{extra}
"#,
            data.display(),
            dir.display()
        ),
    )
}

#[test]
fn missing_annotations_path_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    // Labels and images exist; only the annotations file is absent.
    std::fs::write(dir.path().join("labels.csv"), "lesion_id,diagnosis\n").unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    let config = write_config(
        dir.path(),
        &format!(
            r#"
seed = 1

[paths]
labels = "{0}/labels.csv"
annotations = "{0}/nope.csv"
images = "{0}/images"
output = "{0}/out"
"#,
            dir.path().display()
        ),
    );
    let out = crowdtask(&["prepare", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.csv"), "{stderr}");
}

#[test]
fn missing_config_flag_exits_2() {
    let out = crowdtask(&["prepare"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_arm_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdtask(&[
        "train",
        "--synthetic",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--arm",
        "resnet",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resnet"), "{stderr}");
}

#[test]
fn zero_folds_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_fixture(dir.path(), "\n[dataset]\nfolds = 0\n");
    let out = crowdtask(&["split", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_defaults_to_five_folds_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_fixture(dir.path(), "");
    let out = crowdtask(&["split", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out_root = dir.path().join("out");
    let hash_dir = std::fs::read_dir(&out_root)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let splits: Vec<_> = std::fs::read_dir(hash_dir.join("splits"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(splits.len(), 5);

    let before = std::fs::read(hash_dir.join("splits/fold_0.json")).unwrap();
    let out = crowdtask(&["split", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let after = std::fs::read(hash_dir.join("splits/fold_0.json")).unwrap();
    assert_eq!(before, after, "rerun must be byte-identical");
}

#[test]
fn train_without_prepare_exits_1_naming_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_fixture(dir.path(), "\n[dataset]\nfolds = 2\n");
    // split exists but prepare was never run: feature table is missing.
    let out = crowdtask(&["split", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let out = crowdtask(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--arm",
        "baseline",
        "--variant",
        "frozen",
        "--fold",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("feature_table.csv"), "{stderr}");
}

#[test]
fn ensemble_without_multitask_runs_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdtask(&[
        "ensemble",
        "--synthetic",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--fold",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("predictions.csv"), "{stderr}");
}

#[test]
fn fold_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdtask(&[
        "train",
        "--synthetic",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--fold",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("out of range"), "{stderr}");
}

#[test]
fn bad_config_toml_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "this is not toml = [");
    let out = crowdtask(&["prepare", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_strategy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdtask(&[
        "ensemble",
        "--synthetic",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--strategy",
        "stacking",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_root_env_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_root = dir.path().join("ckpts");
    let out_dir = dir.path().join("run");
    for cmd in [vec!["prepare"], vec!["split"]] {
        let mut args = cmd.clone();
        args.extend(["--synthetic", "--out-dir", out_dir.to_str().unwrap()]);
        let out = crowdtask(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_crowdtask"))
        .args([
            "train",
            "--synthetic",
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--arm",
            "baseline",
            "--variant",
            "frozen",
            "--fold",
            "0",
        ])
        .env("CROWDTASK_CHECKPOINT_ROOT", &ckpt_root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let found = walk_for(&ckpt_root, "weights.bin");
    assert!(found, "checkpoint written under CROWDTASK_CHECKPOINT_ROOT");
}

fn walk_for(root: &Path, name: &str) -> bool {
    let Ok(entries) = std::fs::read_dir(root) else {
        return false;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            if walk_for(&path, name) {
                return true;
            }
        } else if path.file_name().is_some_and(|n| n == name) {
            return true;
        }
    }
    false
}
