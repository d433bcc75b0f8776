use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polarize::checkpoint::{Checkpoint, CheckpointMeta};
use polarize::config::ExperimentConfig;
use polarize::data::{encode_idx_images, encode_idx_labels, DatasetName};
use polarize::frontend::FrontEndMode;
use polarize::model::{ArchConfig, Network};

fn polarize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polarize"))
        .args(args)
        .output()
        .unwrap()
}

/// Writes `n` synthetic 28×28 digits (a bright bar whose position encodes
/// the label) as both splits.
fn write_data(dir: &Path, n: usize) {
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (i, &l) in labels.iter().enumerate() {
        for r in 4..24 {
            for c in 0..3 {
                pixels[i * 784 + r * 28 + 2 + 2 * l as usize + c] = 255;
            }
        }
    }
    for prefix in ["train", "t10k"] {
        fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            encode_idx_images(n, 28, 28, &pixels),
        )
        .unwrap();
        fs::write(
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
            encode_idx_labels(&labels),
        )
        .unwrap();
    }
}

fn write_checkpoint(path: &Path) {
    let arch = ArchConfig {
        conv1_filters: 4,
        conv2_filters: 4,
        fc1_width: 8,
        ..ArchConfig::default()
    };
    let net = Network::init(&arch, 3).unwrap();
    let ck = Checkpoint::from_network(
        &net,
        CheckpointMeta {
            arch,
            front_end_mode: Some(FrontEndMode::Linear),
            front_end_frozen: false,
            stage: 2,
            dataset: "mnist".into(),
            seed: 3,
            config_fingerprint: "test".into(),
        },
    );
    ck.save(path).unwrap();
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn eval_without_checkpoint_fails() {
    let out = polarize(&["eval"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--checkpoint"));
}

#[test]
fn unknown_flag_fails() {
    let out = polarize(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
}

#[test]
fn missing_checkpoint_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = polarize(&["hist", "--checkpoint", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn missing_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = polarize(&["train", "--data-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn hist_density_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 20);
    let ck = dir.path().join("stage2.ckpt");
    write_checkpoint(&ck);
    let csv = dir.path().join("hist.csv");
    let out = polarize(&[
        "hist",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 100);
    let width = rows[1].0 - rows[0].0;
    let total: f64 = rows.iter().map(|r| r.1).sum::<f64>() * width;
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn train_then_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_data(&data, 20);
    let mut cfg = ExperimentConfig::desk(DatasetName::Mnist);
    cfg.arch.conv1_filters = 4;
    cfg.arch.conv2_filters = 4;
    cfg.arch.fc1_width = 8;
    cfg.train.batch_size = 10;
    cfg.train.baseline_epochs = 1;
    for s in &mut cfg.train.stages {
        s.epochs = 1;
    }
    cfg.eval.subset = Some(10);
    cfg.eval.batch_size = 10;
    cfg.eval.attacks = vec![polarize::attacks::AttackSpec::pgd(0.3, 1, 2)];
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let run = dir.path().join("run");
    let d = data.to_str().unwrap();
    let out = polarize(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data-dir",
        d,
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "curve.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let report = dir.path().join("report.csv");
    let ck = run.join("stage3.ckpt");
    let out = polarize(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        d,
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("metric,value"));
    assert!(text.contains("clean"));

    let filters = dir.path().join("filters");
    let out = polarize(&[
        "export-filters",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        filters.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_dir(&filters).unwrap().count(), cfg.arch.front_end_filters);
}
