//! End-to-end tests of the command-line interface: dataset generation,
//! training, evaluation, prediction, exit codes and determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn canet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small config: tiny model, tiny scenes, 20 iterations.
const TINY_CONFIG: &str = "\
[model]
num_classes = 4

[backbone]
stage_blocks = 1,1,1,1
stem_channels = 8
stage_channels = 8,16,24,32
bottleneck = false

[cam]
scales = 2,4
width = 16
fsm_channels = 16
topology = hybrid

[decoder]
low_level_channels = 8
fuse_channels = 16

[train]
base_lr = 0.05
total_iters = 20
batch_size = 2
crop = 32
seed = 7
augment = false
log_every = 5

[scene]
num_classes = 4
canvas = 32
objects_per_image = 3
seed = 3

[paths]
dataset_dir = data
output_dir = run
";

#[test]
fn full_pipeline_gen_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_CONFIG).unwrap();

    let out = canet(&["gen-data", "--spec", "run.cfg", "--out", "data", "--count", "6"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert_eq!(fs::read_dir(dir.path().join("data/images")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(dir.path().join("data/labels")).unwrap().count(), 6);

    let out = canet(&["train", "--config", "run.cfg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("params.backbone_and_flows="), "{text}");
    assert!(dir.path().join("run/checkpoint.cant").exists());
    assert!(dir.path().join("run/train_log.txt").exists());

    let out = canet(
        &["eval", "--checkpoint", "run/checkpoint.cant", "--data", "data"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("metric.pa="), "{text}");
    assert!(text.contains("metric.miou="), "{text}");

    let out = canet(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.cant",
            "--image",
            "data/images/00002.ppm",
            "--out",
            "mask.pgm",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = canet::data::pnm::read_pgm(&dir.path().join("mask.pgm")).unwrap();
    assert_eq!((mask.h, mask.w), (32, 32));
    assert!(mask.data().iter().all(|v| *v < 4), "mask values must be class ids");

    // Prediction is deterministic across runs.
    let out = canet(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.cant",
            "--image",
            "data/images/00002.ppm",
            "--out",
            "mask2.pgm",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(
        fs::read(dir.path().join("mask.pgm")).unwrap(),
        fs::read(dir.path().join("mask2.pgm")).unwrap()
    );
}

#[test]
fn missing_dataset_path_fails_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY_CONFIG.replace("dataset_dir = data", "dataset_dir = nowhere");
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    let out = canet(&["train", "--config", "run.cfg"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("run/checkpoint.cant").exists());
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "[train]\nwarp_speed = 9\n").unwrap();
    let out = canet(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}

#[test]
fn gen_data_zero_count_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_CONFIG).unwrap();
    let out = canet(&["gen-data", "--spec", "run.cfg", "--out", "empty", "--count", "0"], dir.path());
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("empty/manifest.txt")).unwrap(), "");
}

#[test]
fn gen_data_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_CONFIG).unwrap();
    for out_dir in ["a", "b"] {
        let out = canet(&["gen-data", "--spec", "run.cfg", "--out", out_dir, "--count", "3"], dir.path());
        assert!(out.status.success());
    }
    for file in ["manifest.txt", "images/00000.ppm", "labels/00002.pgm"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn topology_choice_changes_param_count() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_CONFIG).unwrap();
    canet(&["gen-data", "--spec", "run.cfg", "--out", "data", "--count", "2"], dir.path());

    let mut counts = Vec::new();
    for topology in ["series", "parallel", "hybrid"] {
        // Width 12 avoids the degenerate point (n-1)*(shared-width) == width
        // where the series and parallel counts coincide.
        let config = TINY_CONFIG
            .replace("topology = hybrid", &format!("topology = {topology}"))
            .replace("width = 16", "width = 12")
            .replace("total_iters = 20", "total_iters = 1")
            .replace("output_dir = run", &format!("output_dir = run_{topology}"));
        let name = format!("{topology}.cfg");
        fs::write(dir.path().join(&name), config).unwrap();
        let out = canet(&["train", "--config", &name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        let count: usize = text
            .lines()
            .find_map(|l| l.strip_prefix("params.backbone_and_flows="))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .expect("count line present");
        counts.push(count);
    }
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-data", "train", "eval", "predict", "verify"] {
        let out = canet(&[sub, "--help"], dir.path());
        assert!(out.status.success());
        let text = stdout(&out);
        assert!(text.contains("--"), "{sub} help lists flags");
    }
    let out = canet(&["eval", "--help"], dir.path());
    assert!(stdout(&out).contains("default: 1.0"), "{}", stdout(&out));
}
