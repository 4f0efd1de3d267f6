use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vice::error::{EXIT_CONFIG, EXIT_DATA};

const TINY: &str = r#"
seed = 3

[dataset]
images = 6
size = 48
classes = 4
val_fraction = 0.34

[train]
images_per_batch = 2
views = 2
view_size = 32
region_size = 8
embed_dim = 8
concepts = 4
queue_capacity = 16
warmup_steps = 1
steps = 3
checkpoint_every_epochs = 1

[eval]
k_eval = 4
kmeans_iterations = 5
probe_epochs = 2
probe_pixel_stride = 16
"#;

fn vice(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vice"))
        .args(["--config", dir.join("run.toml").to_str().unwrap()])
        .args(["--data", dir.join("data").to_str().unwrap()])
        .args(["--out", dir.join("out").to_str().unwrap()])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = vice(dir.path(), &["gen-dataset"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn gen_dataset_is_deterministic() {
    let dir = setup();
    let data = dir.path().join("data");
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(data.join("labels")).unwrap().count(), 6);
    let before = fs::read(data.join("images/0002.png")).unwrap();
    let again = vice(dir.path(), &["gen-dataset"]);
    assert!(again.status.success());
    assert_eq!(fs::read(data.join("images/0002.png")).unwrap(), before);
}

#[test]
fn train_eval_visualize_round_trip() {
    let dir = setup();
    let out = vice(dir.path(), &["train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    assert!(run.join("final.ckpt").exists());
    // 4 training images at 2 per batch: one checkpoint after each full epoch.
    assert!(run.join("epoch_0001.ckpt").exists());

    let ckpt = run.join("final.ckpt");
    let out = vice(dir.path(), &["eval", ckpt.to_str().unwrap(), "--mode", "both"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["eval_cluster.json", "eval_linear.json", "eval.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cluster: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval_cluster.json")).unwrap()).unwrap();
    let miou = cluster["hungarian"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let img = dir.path().join("data/images/0000.png");
    let out = vice(dir.path(), &["visualize", ckpt.to_str().unwrap(), img.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("0000_viz.png").exists());
}

#[test]
fn resume_continues_the_step_count() {
    let dir = setup();
    assert!(vice(dir.path(), &["train", "--steps", "2"]).status.success());
    let ckpt = dir.path().join("out/final.ckpt");
    let out = vice(dir.path(), &["train", "--steps", "3", "--resume", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2]);
}

#[test]
fn bench_and_dump_views_write_outputs() {
    let dir = setup();
    let out = vice(dir.path(), &["bench-decompose", "--sizes", "8,16", "--images", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/bench_decompose.csv")).unwrap();
    // header + images × methods × sizes
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let out = vice(dir.path(), &["dump-views", "0000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/views_0000_0/centers.png").exists());
}

#[test]
fn invalid_config_exits_with_config_code_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[train]\nmask_coverage = 3.0\n").unwrap();
    let out = vice(dir.path(), &["gen-dataset"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(!dir.path().join("data").exists());

    fs::write(dir.path().join("run.toml"), "[train]\nwat = 1\n").unwrap();
    assert_eq!(vice(dir.path(), &["train"]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = vice(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn oversized_k_eval_is_a_clean_error() {
    let dir = setup();
    assert!(vice(dir.path(), &["train", "--steps", "1"]).status.success());
    let ckpt = dir.path().join("out/final.ckpt");
    let out = vice(dir.path(), &["eval", ckpt.to_str().unwrap(), "--mode", "cluster", "--k-eval", "1000000"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_eval"));
}
