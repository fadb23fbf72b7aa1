use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relate3d::data_io::{load_frames, save_frames, Frame, ProposalSet};
use relate3d::nn::Matrix;
use relate3d::relation::{RefineHead, RelationModel};
use relate3d_cli::commands::{load_detections, refine_frame};
use serde_json::Value;
use tempfile::TempDir;

fn relate3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relate3d"))
        .args(args)
        .env("RELATE3D_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = relate3d(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &TempDir, name: &str, frames: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    ok(&[
        "synth", "--pattern", "parallel_parking", "--n", "12", "--seed", &seed.to_string(),
        "--frames", &frames.to_string(), "--feature-dim", "8", "--out", s(&path),
    ]);
    path
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_zero_frames_writes_an_empty_file() {
    let dir = TempDir::new().unwrap();
    let path = synth(&dir, "empty.jsonl", 0, 1);
    assert_eq!(fs::read(&path).unwrap().len(), 0);
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.jsonl", 3, 9);
    let b = synth(&dir, "b.jsonl", 3, 9);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let frames = load_frames(&a).unwrap();
    assert_eq!(frames.len(), 3);
    for f in &frames {
        assert_eq!(f.ground_truth.len(), 12);
        assert_eq!(f.proposals.len(), 14);
        assert_eq!(f.proposals.feature_dim(), 8);
    }
}

#[test]
fn graph_degrees_and_brute_force_agreement() {
    let dir = TempDir::new().unwrap();
    let frames = synth(&dir, "f.jsonl", 4, 2);
    let fast = dir.path().join("fast.jsonl");
    let slow = dir.path().join("slow.jsonl");
    for strategy in [["--strategy", "knn", "--k", "4"], ["--strategy", "radius", "--r", "6"]] {
        let mut args = vec!["graph", "--in", s(&frames), "--out", s(&fast)];
        args.extend(strategy);
        ok(&args);
        args[4] = s(&slow);
        args.push("--brute-force");
        ok(&args);
        let (a, b) = (jsonl(&fast), jsonl(&slow));
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x["graph"], y["graph"]);
            assert_eq!(x["num_edges"], y["num_edges"]);
        }
    }
}

#[test]
fn graph_edge_cases() {
    let dir = TempDir::new().unwrap();
    let mut frames = load_frames(&synth(&dir, "f.jsonl", 1, 3)).unwrap();
    let base = frames.remove(0);
    let subset = |n: usize, id: &str| {
        let idx: Vec<usize> = (0..n).collect();
        let p = &base.proposals;
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| p.features().row(i).to_vec()).collect();
        Frame {
            frame_id: id.to_string(),
            ground_truth: vec![],
            proposals: ProposalSet::new(
                idx.iter().map(|&i| p.boxes()[i]).collect(),
                Matrix::from_rows(&rows, p.feature_dim()).unwrap(),
                idx.iter().map(|&i| p.classes()[i]).collect(),
                idx.iter().map(|&i| p.scores()[i]).collect(),
            )
            .unwrap(),
        }
    };
    let path = dir.path().join("small.jsonl");
    save_frames(&[subset(1, "one"), subset(10, "ten")], &path).unwrap();
    let out = dir.path().join("g.jsonl");

    ok(&["graph", "--in", s(&path), "--frame-id", "one", "--k", "16", "--out", s(&out)]);
    assert_eq!(jsonl(&out)[0]["num_edges"], 0);

    ok(&["graph", "--in", s(&path), "--frame-id", "ten", "--k", "16", "--out", s(&out)]);
    let rec = &jsonl(&out)[0];
    assert_eq!(rec["num_edges"], 90);
    assert_eq!(rec["degree"]["min"], 9);
    assert_eq!(rec["degree"]["max"], 9);

    let missing = relate3d(&["graph", "--in", s(&path), "--frame-id", "nope", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = TempDir::new().unwrap();
    let frames = synth(&dir, "f.jsonl", 5, 4);
    let ckpt = dir.path().join("m.json");
    let metrics = dir.path().join("m.csv");
    ok(&[
        "train", "--in", s(&frames), "--epochs", "0", "--seed", "11",
        "--checkpoint-out", s(&ckpt), "--metrics-out", s(&metrics),
    ]);
    let model = RelationModel::from_json(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    let fresh = RelationModel::new(model.config().clone(), 11).unwrap();
    assert_eq!(model, fresh);
    let csv = fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,loss,heading_mae,center_mae\n0,"));
}

#[test]
fn training_twice_gives_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let frames = synth(&dir, "f.jsonl", 10, 5);
    let run = |name: &str| {
        let metrics = dir.path().join(format!("{name}.csv"));
        let ckpt = dir.path().join(format!("{name}.json"));
        ok(&[
            "train", "--in", s(&frames), "--epochs", "2", "--seed", "3", "--batch-frames", "4",
            "--checkpoint-out", s(&ckpt), "--metrics-out", s(&metrics),
        ]);
        (fs::read(&metrics).unwrap(), fs::read(&ckpt).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a.0).unwrap().lines().count(), 4);
}

#[test]
fn zero_head_refines_to_the_proposals() {
    let dir = TempDir::new().unwrap();
    let frames_path = synth(&dir, "f.jsonl", 3, 6);
    let frames = load_frames(&frames_path).unwrap();
    let config = relate3d::relation::RelationConfig {
        input_feature_dim: 8,
        ..relate3d::relation::RelationConfig::toy(
            relate3d::spatial_graph::GraphStrategy::Knn { k: 4 },
            Default::default(),
        )
    };
    let mut model = RelationModel::new(config.clone(), 1).unwrap();
    model.head = RefineHead::zeros(&config);
    let ckpt = dir.path().join("zero.json");
    fs::write(&ckpt, model.to_json()).unwrap();
    let out = dir.path().join("det.jsonl");
    ok(&["refine", "--in", s(&frames_path), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let dets = load_detections(&out).unwrap();
    for (f, d) in frames.iter().zip(&dets) {
        assert_eq!(d, &refine_frame(&model, f).unwrap());
        for (det, b) in d.detections.iter().zip(f.proposals.boxes()) {
            assert_eq!(&det.box3d, b);
            assert_eq!(det.score, 0.5);
        }
    }

    // a trained checkpoint also matches the library path
    let trained = dir.path().join("t.json");
    ok(&[
        "train", "--in", s(&frames_path), "--epochs", "1", "--seed", "2",
        "--checkpoint-out", s(&trained), "--metrics-out", s(&dir.path().join("t.csv")),
    ]);
    ok(&["refine", "--in", s(&frames_path), "--checkpoint", s(&trained), "--out", s(&out)]);
    let model = RelationModel::from_json(&fs::read_to_string(&trained).unwrap()).unwrap();
    for (f, d) in frames.iter().zip(load_detections(&out).unwrap()) {
        assert_eq!(d, refine_frame(&model, f).unwrap());
    }
}

#[test]
fn eval_perfect_and_empty_detectors() {
    let dir = TempDir::new().unwrap();
    let frames_path = synth(&dir, "f.jsonl", 3, 7);
    let frames = load_frames(&frames_path).unwrap();
    let perfect: Vec<String> = frames
        .iter()
        .map(|f| {
            let dets: Vec<Value> = f
                .ground_truth
                .iter()
                .map(|g| serde_json::json!({"class": g.class, "box": g.box3d.unwrap(), "score": 0.9}))
                .collect();
            serde_json::json!({"frame_id": f.frame_id, "detections": dets}).to_string()
        })
        .collect();
    let det = dir.path().join("det.jsonl");
    fs::write(&det, perfect.join("\n")).unwrap();
    let report = dir.path().join("report.json");
    let pr = dir.path().join("pr.csv");
    ok(&[
        "eval", "--gt", s(&frames_path), "--det", s(&det), "--classes", "Car",
        "--recall-mode", "r11", "--out", s(&report), "--pr-out", s(&pr),
    ]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let entries = r["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 6);
    for e in entries.iter().filter(|e| e["num_gt"].as_u64().unwrap() > 0) {
        assert_eq!(e["ap"], 1.0);
    }
    assert!(report.with_extension("txt").exists());
    assert!(fs::read_to_string(&pr).unwrap().starts_with("class,difficulty,metric,recall,precision"));

    fs::write(&det, "").unwrap();
    ok(&["eval", "--gt", s(&frames_path), "--det", s(&det), "--classes", "Car", "--out", s(&report)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["entries"].as_array().unwrap().iter().all(|e| e["ap"] == 0.0));
}

#[test]
fn check_suites_pass() {
    for (suite, trials) in [("graph", "50"), ("iou", "50"), ("grad", "1")] {
        let v = ok(&["check", "--suite", suite, "--trials", trials]);
        assert_eq!(v["passed"], true, "{suite}: {v}");
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("o.jsonl");
    assert_eq!(relate3d(&["synth", "--pattern", "spiral", "--n", "3", "--seed", "1", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(relate3d(&["graph", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(relate3d(&["graph", "--in", s(&missing), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(relate3d(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let r = relate3d(&["graph", "--in", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 1"));
}
