mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{tiny_config, write_config};
use image::Rgb;

fn bas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bas")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Config file plus a trained checkpoint.
fn trained(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg_path = dir.join("config.json");
    write_config(&tiny_config(dir), &cfg_path);
    ok(bas(&["train", "--config", p(&cfg_path)]));
    (cfg_path, dir.join("run/checkpoints/last.ckpt"))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn gen_data_writes_the_index_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("synth");
    ok(bas(&[
        "gen-data",
        "--set",
        "dataset.synthetic.num_categories=2",
        "--set",
        "dataset.synthetic.train_per_category=10",
        "--set",
        "dataset.synthetic.test_per_category=3",
        "--set",
        "dataset.synthetic.image_size=48",
        "--out-dir",
        p(&root),
    ]));
    for f in ["images.txt", "image_class_labels.txt", "train_test_split.txt", "bounding_boxes.txt"] {
        assert_eq!(fs::read_to_string(root.join(f)).unwrap().lines().count(), 26, "{f}");
    }
    assert!(root.join("masks").is_dir());
}

#[test]
fn eval_honours_inference_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = dir.path().join("eval");
    ok(bas(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--topk",
        "2",
        "--tau",
        "0.35",
        "--protocol",
        "top1",
        "--out-dir",
        p(&out),
    ]));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((m["k"].as_u64(), m["tau"].as_f64(), m["protocol"].as_str()), (Some(2), Some(0.35), Some("top1")));
    assert_eq!(fs::read_to_string(out.join("per_image.jsonl")).unwrap().lines().count(), 10);

    let ten = dir.path().join("ten");
    ok(bas(&["eval", "--checkpoint", p(&ck), "--set", "eval.ten_crop=true", "--out-dir", p(&ten)]));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(ten.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["ten_crop"], true);
}

#[test]
fn eval_auto_tau_picks_from_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = dir.path().join("eval");
    ok(bas(&["eval", "--checkpoint", p(&ck), "--tau", "auto", "--out-dir", p(&out)]));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let tau = m["tau"].as_f64().unwrap();
    assert!(bas::sweep::auto_tau_grid().iter().any(|&t| t == tau));
}

#[test]
fn probe_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = dir.path().join("probe");
    ok(bas(&[
        "probe",
        "--checkpoint",
        p(&ck),
        "--split",
        "test",
        "--n-range",
        "-2..2",
        "--samples",
        "4",
        "--out-dir",
        p(&out),
    ]));
    let rows = csv_rows(&out.join("probe_curve.csv"));
    assert!(!rows.is_empty() && rows.len() <= 5);
    assert!(out.join("probe_curve.png").is_file());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("probe_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 4);
}

#[test]
fn visualize_draws_red_truth_and_green_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = dir.path().join("vis");
    let stdout = ok(bas(&["visualize", "--checkpoint", p(&ck), "--count", "3", "--out-dir", p(&out)]));
    let files: Vec<&str> = stdout.lines().collect();
    assert_eq!(files.len(), 3);
    let mut with_red = 0;
    for f in files {
        assert!(f.starts_with(p(&out.join("overlays"))));
        let img = image::open(f).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (32, 32));
        let has = |c: Rgb<u8>| img.pixels().any(|px| *px == c);
        assert!(has(bas::plot::GREEN), "{f} has no prediction box");
        with_red += has(bas::plot::RED) as usize;
    }
    // Green is drawn last, so red only vanishes where the boxes coincide.
    assert!(with_red > 0);
}

#[test]
fn visualize_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = bas(&["visualize", "--checkpoint", p(&ck), "--ids", "nope", "--out-dir", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ck) = trained(dir.path());
    let k_dir = dir.path().join("k");
    ok(bas(&["sweep", "--config", p(&cfg), "--axis", "k", "--values", "1,2", "--checkpoint", p(&ck), "--out-dir", p(&k_dir)]));
    let rows = csv_rows(&k_dir.join("sweep_k.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2"]);
    assert!(rows.iter().all(|r| r.iter().all(|c| !c.is_empty())));
    assert!(k_dir.join("sweep_k.png").is_file());

    let sp = dir.path().join("split");
    ok(bas(&[
        "sweep",
        "--config",
        p(&cfg),
        "--axis",
        "split_point",
        "--values",
        "stage1,stage2,stage3",
        "--out-dir",
        p(&sp),
    ]));
    assert_eq!(csv_rows(&sp.join("sweep_split_point.csv")).len(), 3);
    assert!(sp.join("split_point_stage2/metrics.json").is_file());
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let mut cfg = tiny_config(dir.path());
    cfg.optim.lr = 1e30;
    write_config(&cfg, &cfg_path);
    let out = bas(&["train", "--config", p(&cfg_path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));

    let out = bas(&["train", "--config", p(&cfg_path), "--set", "batch_size=0"]);
    assert!(!out.status.success());
    let out = bas(&["train", "--set", "loss.nonsense"]);
    assert!(!out.status.success());
}
