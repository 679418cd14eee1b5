use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use wnet_core::data::io;
use wnet_core::data::synth::{generate_pair, ScenePairSpec};

fn wnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn inspect_prints_manifest_and_delta() {
    let out = ok(wnet(&["inspect", "--model", "wnet"]));
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with('"')).collect();
    assert_eq!(rows.len(), 17);
    assert!(rows[0].starts_with("\"Input\""));
    assert!(out.contains("total parameters (layer sum): 42553601"));
    assert!(out.contains("total parameters (closed form): 42553601"));
    assert!(out.contains("reference count 42570625: delta -17024"), "{out}");
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let pred = dir.path().join("pred");

    let out = ok(wnet(&[
        "gen-data",
        "--out",
        p(&data),
        "--pairs",
        "5",
        "--size",
        "32",
        "--seed",
        "1",
    ]));
    assert!(out.contains("wrote 5 pairs (4 train, 1 val)"), "{out}");
    assert!(data.join("run_config.json").is_file());

    ok(wnet(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--base-width",
        "0.0625",
        "--patch",
        "16",
        "--batch",
        "2",
        "--max-steps",
        "2",
        "--epochs",
        "1",
    ]));
    for f in ["checkpoint.cdck", "train_log.csv", "run_config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let scene = generate_pair(&ScenePairSpec::new(500, 8)).unwrap();
    io::save_rgb(&scene.t1, &dir.path().join("t1.png")).unwrap();
    io::save_rgb(&scene.t2, &dir.path().join("t2.png")).unwrap();
    io::save_gray(&scene.gt, &dir.path().join("gt.png")).unwrap();
    let out = ok(wnet(&[
        "infer",
        "--checkpoint",
        p(&run.join("checkpoint.cdck")),
        "--t1",
        p(&dir.path().join("t1.png")),
        "--t2",
        p(&dir.path().join("t2.png")),
        "--out",
        p(&pred),
    ]));
    assert!(
        out.contains("tile plan: 9 windows, x origins [0, 128, 244], y origins [0, 128, 244]"),
        "{out}"
    );
    for f in ["prob.png", "change.png", "prob.f32", "run_config.json"] {
        assert!(pred.join(f).is_file(), "{f}");
    }
    let (prob, w, h) = io::read_prob_map(&pred.join("prob.f32")).unwrap();
    assert_eq!((w, h, prob.len()), (500, 500, 250_000));
    assert!(prob.iter().all(|v| (0.0..=1.0).contains(v)));

    let summary = dir.path().join("eval/summary.json");
    let gt = data.join("0000_gt.png");
    let out = ok(wnet(&[
        "eval",
        "--pred",
        p(&gt),
        "--gt",
        p(&gt),
        "--summary",
        p(&summary),
    ]));
    assert!(out.contains("kappa 1.000000 oer 0.000000"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["rates"]["kappa"], 1.0);
    assert!(dir.path().join("eval/run_config.json").is_file());

    let curves = dir.path().join("curves");
    ok(wnet(&[
        "eval",
        "--pred",
        p(&pred.join("change.png")),
        "--gt",
        p(&dir.path().join("gt.png")),
        "--prob",
        p(&pred.join("prob.f32")),
        "--curves",
        p(&curves),
        "--summary",
        p(&summary),
    ]));
    for f in ["sweep.csv", "fm_curve.csv", "pr_curve.csv", "run_config.json"] {
        assert!(curves.join(f).is_file(), "{f}");
    }
}

#[test]
fn eval_refuses_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    io::save_gray(&GrayImage::from_pixel(8, 8, Luma([255])), &a).unwrap();
    io::save_gray(&GrayImage::from_pixel(8, 9, Luma([255])), &b).unwrap();
    let o = wnet(&[
        "eval",
        "--pred",
        p(&a),
        "--gt",
        p(&b),
        "--summary",
        p(&dir.path().join("s.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));
    assert!(!dir.path().join("s.json").exists());
}

#[test]
fn bad_invocations_give_one_line_diagnostics() {
    let o = wnet(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{}", stderr(&o));

    let o = wnet(&[
        "infer",
        "--checkpoint",
        "/nonexistent/model.cdck",
        "--t1",
        "x.png",
        "--t2",
        "y.png",
        "--out",
        "/tmp/none",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error: ") && err.contains("/nonexistent/model.cdck"),
        "{err}"
    );
}
