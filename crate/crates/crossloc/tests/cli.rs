use std::path::Path;
use std::process::{Command, Output};

use crossloc::experiments::fit_anchors;
use crossloc_core::dataset::Split;
use crossloc_core::detection::shape_iou;
use crossloc_core::synth::{generate, SyntheticSpec};

const SMALL: &str = "version = 1\n[data]\ntrain_size = 10\nval_size = 2\ntest_size = 3\n[train]\nepochs = 0\n";

fn crossloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossloc"))
        .args(args)
        .env_remove("CROSSLOC_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crossloc(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_usage_errors() {
    assert!(ok(&["--help"]).contains("sweep-k"));
    let bad = crossloc(&["frobnicate"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = crossloc(&["eval", "--checkpoint", "x", "--split", "dev"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown split"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = crossloc(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let cfg = dir.path().join("v9.toml");
    std::fs::write(&cfg, "version = 9\n").unwrap();
    let out = crossloc(&["--config", cfg.to_str().unwrap(), "anchors"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn zero_epoch_train_then_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&["--config", &cfg, "train", "--out", run_s]);
    for f in ["model.ckpt", "anchors.txt", "loss.csv", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(run.join("loss.csv")).unwrap(),
        "epoch,lr,loss\n"
    );
    assert_eq!(
        std::fs::read_to_string(run.join("anchors.txt"))
            .unwrap()
            .lines()
            .count(),
        9
    );

    let ckpt = run.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let eval = dir.path().join("eval");
    let table = ok(&[
        "--config",
        &cfg,
        "eval",
        "--checkpoint",
        ckpt_s,
        "--split",
        "val",
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert!(table.contains("accu@0.5"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 2);

    let pics = dir.path().join("pics");
    std::fs::create_dir(&pics).unwrap();
    ok(&[
        "--config",
        &cfg,
        "infer",
        "--checkpoint",
        ckpt_s,
        "--id",
        "syn000007",
        "--out",
        pics.to_str().unwrap(),
    ]);
    let heat = image::open(pics.join("syn000007_heatmap.png")).unwrap().to_rgb8();
    assert_eq!(heat.dimensions(), (128, 128));
    let lum: Vec<u32> = heat.pixels().map(|p| p.0.iter().map(|&c| c as u32).sum()).collect();
    assert!(lum.iter().max() > lum.iter().min());
    let boxes = image::open(pics.join("syn000007_box.png")).unwrap().to_rgb8();
    assert!(boxes.pixels().any(|p| p.0 == [0, 255, 0]));
    let pred: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pics.join("syn000007_prediction.json")).unwrap()).unwrap();
    assert_eq!(pred["id"], "syn000007");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("from_env");
    let status = Command::new(env!("CARGO_BIN_EXE_crossloc"))
        .args(["--config", &cfg, "anchors"])
        .env("CROSSLOC_OUT", &out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join("anchors.txt").is_file());
}

#[test]
fn gen_data_writes_loadable_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "gen-data", "--out", data.to_str().unwrap()]);
    let ann = data.join("annotations.jsonl");
    assert_eq!(std::fs::read_to_string(&ann).unwrap().lines().count(), 15);
    // The on-disk copy feeds the anchor clustering exactly like the
    // in-memory render.
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", &cfg, "anchors", "--out", a.to_str().unwrap()]);
    ok(&[
        "--config",
        &cfg,
        "--annotations",
        ann.to_str().unwrap(),
        "anchors",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read_to_string(a.join("anchors.txt")).unwrap(),
        std::fs::read_to_string(b.join("anchors.txt")).unwrap()
    );
}

#[test]
fn gradcheck_subcommand_passes() {
    let text = ok(&["gradcheck", "--variant", "full", "--per-tensor", "2"]);
    assert!(text.contains("max relative error"));
}

#[test]
fn clustered_anchors_cover_the_boxes() {
    let spec = SyntheticSpec {
        n_samples: 200,
        ..SyntheticSpec::default()
    };
    let samples = generate(&spec, 0, Split::Train).unwrap();
    let anchors = fit_anchors(&samples, 100, 0).unwrap();
    let mean = samples
        .iter()
        .map(|s| {
            anchors
                .as_slice()
                .iter()
                .map(|&a| shape_iou((s.gt.w, s.gt.h), a))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / samples.len() as f64;
    assert!(mean >= 0.5, "mean best-anchor IoU {mean}");
}
