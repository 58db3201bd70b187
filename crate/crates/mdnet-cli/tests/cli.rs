//! End-to-end tests of the `mdnet` binary: exit codes, file formats, and
//! determinism of the command surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdnet_core::geometry::synthetic::{synthetic_two_view, SceneConfig};
use mdnet_core::geometry::correspondences_to_text;

fn mdnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mdnet"))
}

fn run(args: &[&str]) -> Output {
    mdnet().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Two 16x16 training images with block-structured labels.
fn write_toy_manifest(dir: &Path) -> PathBuf {
    for i in 0..2u8 {
        let mut pixels = vec![0u8; 256];
        let mut labels = vec![0u8; 256];
        for y in 0..16 {
            for x in 0..16 {
                let block = (y / 8) * 2 + x / 8;
                let class = (block as u8 + i) % 3;
                let level = [40u8, 128, 220][class as usize];
                let jitter = ((x * 7 + y * 13) % 9) as u8;
                pixels[y * 16 + x] = level + jitter;
                // ids 0 (sky), 3 (human), 10 (building) span the classes
                labels[y * 16 + x] = [0u8, 3, 10][class as usize];
            }
        }
        image::GrayImage::from_raw(16, 16, pixels)
            .unwrap()
            .save(dir.join(format!("img{i}.png")))
            .unwrap();
        image::GrayImage::from_raw(16, 16, labels)
            .unwrap()
            .save(dir.join(format!("lab{i}.png")))
            .unwrap();
    }
    let manifest = dir.join("list.txt");
    fs::write(&manifest, "img0.png\tlab0.png\nimg1.png\tlab1.png\n").unwrap();
    manifest
}

/// A 64x64 image with one bright square (four corners for the detector).
fn write_corner_image(dir: &Path) -> PathBuf {
    let mut pixels = vec![10u8; 64 * 64];
    for y in 20..36 {
        for x in 24..40 {
            pixels[y * 64 + x] = 230;
        }
    }
    let path = dir.join("scene.png");
    image::GrayImage::from_raw(64, 64, pixels).unwrap().save(&path).unwrap();
    path
}

fn train_toy(dir: &Path) -> PathBuf {
    let manifest = write_toy_manifest(dir);
    let ckpt = dir.join("model.mdnc");
    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "7",
        "--epochs",
        "10",
    ]);
    assert_code(&out, 0);
    ckpt
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_toy(dir.path());
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("model.mdnc.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 11, "10 steps + accuracy line:\n{log}");
    for line in &lines[..10] {
        assert_eq!(line.split_whitespace().count(), 6, "loss line {line:?}");
    }
    assert!(lines[10].starts_with("accuracy "), "{log}");

    // identical seed, identical bytes
    let first = fs::read(&ckpt).unwrap();
    let out = run(&[
        "train",
        "--manifest",
        dir.path().join("list.txt").to_str().unwrap(),
        "--out",
        dir.path().join("model2.mdnc").to_str().unwrap(),
        "--seed",
        "7",
        "--epochs",
        "10",
    ]);
    assert_code(&out, 0);
    let second = fs::read(dir.path().join("model2.mdnc")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn train_missing_manifest_names_path() {
    let out = run(&["train", "--manifest", "no/such/list.txt", "--out", "/tmp/x.mdnc"]);
    assert_code(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no/such/list.txt"), "{stderr}");
}

#[test]
fn train_without_required_flags_is_usage_error() {
    let out = run(&["train", "--out", "/tmp/x.mdnc"]);
    assert_code(&out, 2);
}

#[test]
fn unknown_config_key_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochss=4\n").unwrap();
    let manifest = write_toy_manifest(dir.path());
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("m.mdnc").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn extract_match_and_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_toy(dir.path());
    let scene = write_corner_image(dir.path());

    // plain extraction is deterministic
    let feats_a = dir.path().join("a.mdf");
    let out = run(&[
        "extract",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        feats_a.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text_a = fs::read_to_string(&feats_a).unwrap();
    assert!(text_a.starts_with("MDF1 "), "{text_a}");
    let count: usize = text_a.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(count >= 4, "expected the square corners, got {count}");

    let feats_b = dir.path().join("b.mdf");
    let out = run(&[
        "extract",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        feats_b.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_eq!(text_a, fs::read_to_string(&feats_b).unwrap());

    // max-points caps the file
    let capped = dir.path().join("capped.mdf");
    let out = run(&[
        "extract",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        capped.to_str().unwrap(),
        "--max-points",
        "2",
    ]);
    assert_code(&out, 0);
    let text = fs::read_to_string(&capped).unwrap();
    assert!(text.lines().count() <= 3);

    // static filter leaves only S attributes
    let filtered = dir.path().join("filtered.mdf");
    let out = run(&[
        "extract",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        filtered.to_str().unwrap(),
        "--filter-static",
    ]);
    assert_code(&out, 0);
    for line in fs::read_to_string(&filtered).unwrap().lines().skip(1) {
        assert_eq!(line.split_whitespace().nth(3), Some("S"), "{line}");
    }

    // matching a file against itself recovers identity pairs
    let corrs = dir.path().join("corrs.txt");
    let out = run(&[
        "match",
        "--left",
        feats_a.to_str().unwrap(),
        "--right",
        feats_b.to_str().unwrap(),
        "--out",
        corrs.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = fs::read_to_string(&corrs).unwrap();
    assert_eq!(text.lines().count(), count, "self-match should keep all points");
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], f[2], "self-match x coordinates differ: {line}");
    }

    // motion inference emits a parseable grid
    let grid_path = dir.path().join("grid.txt");
    let out = run(&[
        "infer-motion",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        grid_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let grid = fs::read_to_string(&grid_path).unwrap();
    assert!(grid.starts_with("8 8\n"), "{grid}");
}

#[test]
fn eval_iou_matches_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let truth = dir.path().join("truth.txt");
    fs::write(&pred, "2 2\nSS\nMU\n").unwrap();
    fs::write(&truth, "2 2\nSM\nMU\n").unwrap();
    let out = run(&["eval", "iou", "--pred", pred.to_str().unwrap(), "--truth", truth.to_str().unwrap()]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean 0.666667"), "{stdout}");
    assert!(stdout.contains("unstable 1.000000 0.250000"), "{stdout}");
}

#[test]
fn eval_ransac_on_clean_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synthetic_two_view(&SceneConfig {
        n_static: 50,
        seed: 3,
        ..SceneConfig::default()
    });
    let path = dir.path().join("corrs.txt");
    fs::write(&path, correspondences_to_text(&scene.correspondences)).unwrap();
    let out = run(&["eval", "ransac", "--corrs", path.to_str().unwrap(), "--seed", "1"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ratio 1.000000"), "{stdout}");

    // too few points is a numerical failure
    fs::write(&path, "0 0 1 1\n2 2 3 3\n").unwrap();
    let out = run(&["eval", "ransac", "--corrs", path.to_str().unwrap()]);
    assert_code(&out, 4);
}

#[test]
fn eval_align_and_drift_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    fs::write(&a, "0 0 0 0\n1 1 0 0\n2 2 1 0\n3 3 1 1\n").unwrap();
    let out = run(&["eval", "align", "--est", a.to_str().unwrap(), "--gt", a.to_str().unwrap()]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rmse 0.000000"), "{stdout}");

    let closed = dir.path().join("closed.txt");
    fs::write(&closed, "0 0 0 0\n1 3 4 0\n2 0 0 0\n").unwrap();
    let out = run(&["eval", "drift", "--traj", closed.to_str().unwrap()]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("drift 0.00 0.00 0.00"), "{stdout}");

    let open = dir.path().join("open.txt");
    fs::write(&open, "0 0 0 0\n9 -1.2 0.3 0\n").unwrap();
    let out = run(&["eval", "drift", "--traj", open.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("drift_raw -1.2000 0.3000 1.2369"), "{stdout}");

    // malformed trajectory names the line
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0 0 0 0\n1 2 3\n").unwrap();
    let out = run(&["eval", "drift", "--traj", bad.to_str().unwrap()]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn corrupt_checkpoint_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mdnc");
    fs::write(&bad, b"XXXX not a checkpoint").unwrap();
    let scene = write_corner_image(dir.path());
    let out = run(&[
        "infer-motion",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--image",
        scene.to_str().unwrap(),
        "--out",
        dir.path().join("g.txt").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}
