use std::path::Path;
use std::process::{Command, Output};

use bevfuse::config::ExperimentConfig;
use bevfuse::eval::{Detection, EvalReport};
use bevfuse::sim::read_dataset;
use serde_json::{json, Value};

fn bevfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevfuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bevfuse(args);
    assert!(out.status.success(), "bevfuse {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(args: &[&str], needle: &str) {
    let out = bevfuse(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success(), "bevfuse {args:?} should fail");
    assert!(err.contains(needle), "stderr of {args:?} lacks {needle:?}: {err}");
}

fn desk_config(dir: &Path) -> String {
    let p = dir.join("desk.json");
    std::fs::write(&p, ExperimentConfig::desk().to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_zero_frames_gives_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["generate", "--frames", "0", "--out", s(&out)]);
    for split in ["train", "val", "val_nice", "val_bad", "val_far"] {
        assert!(read_dataset(&out.join(split)).unwrap().is_empty(), "{split}");
    }
    assert!(out.join("config.json").is_file());
}

#[test]
fn eval_of_ground_truth_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", &cfg, "--frames", "3", "--out", s(&data)]);
    let frames = read_dataset(&data.join("val")).unwrap();
    let detections: Vec<Detection> = frames
        .iter()
        .flat_map(|f| {
            f.scene.boxes.iter().map(|b| Detection {
                bbox: *b,
                score: 1.0,
                frame_id: f.frame_id,
            })
        })
        .collect();
    assert!(!detections.is_empty());
    let pred = tmp.path().join("pred.json");
    std::fs::write(&pred, json!({ "modalities": "L", "detections": detections }).to_string()).unwrap();
    let out = tmp.path().join("report");
    ok(&["eval", "--config", &cfg, "--pred", s(&pred), "--gt", s(&data.join("val")), "--out", s(&out)]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config_hash, ExperimentConfig::desk().hash());
    assert_eq!(report.seed, 2024);
    let mut defined = 0;
    for c in &report.classes {
        for t in &c.ap {
            if let Some(ap) = t.ap {
                assert_eq!(ap, 100.0, "{:?} at {} m", c.class, t.threshold);
                defined += 1;
            }
        }
    }
    assert!(defined >= 4);
}

#[test]
fn errors_name_the_key_or_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    fails_with(&["generate", "--set", "train.bogus=1", "--out", s(&out)], "train.bogus");
    fails_with(&["generate", "--set", "train.pretrain_epochs=\"many\"", "--out", s(&out)], "train.pretrain_epochs");
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"widths": 3}}"#).unwrap();
    fails_with(&["generate", "--config", s(&bad), "--out", s(&out)], "model.widths");
    fails_with(&["generate", "--config", s(&tmp.path().join("missing.json")), "--out", s(&out)], "missing.json");
    let out2 = bevfuse(&["generate", "--no-such-flag"]);
    assert!(!out2.status.success());
}

#[test]
fn fuse_needs_stage_one_weights_and_version_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", &cfg, "--frames", "1", "--out", s(&data)]);
    let w = tmp.path().join("w");
    fails_with(&["train", "--config", &cfg, "--stage", "fuse", "--modalities", "LC", "--data", s(&data), "--out", s(&w)], "weights");

    let manifest = data.join("val").join("manifest.json");
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["version"] = json!(999);
    std::fs::write(&manifest, m.to_string()).unwrap();
    let pred = tmp.path().join("p.json");
    std::fs::write(&pred, r#"{"modalities": "L", "detections": []}"#).unwrap();
    fails_with(&["eval", "--config", &cfg, "--pred", s(&pred), "--gt", s(&data.join("val")), "--out", s(&w)], "version mismatch");
    fails_with(&["eval", "--config", &cfg, "--pred", s(&pred), "--gt", s(&data.join("val")), "--out", s(&w)], "manifest.json");
}

#[test]
fn train_infer_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", &cfg, "--frames", "2", "--out", s(&data)]);
    let w = tmp.path().join("w");
    ok(&[
        "train", "--config", &cfg, "--stage", "pretrain", "--modalities", "R", "--data", s(&data), "--out", s(&w), "--set", "train.pretrain_epochs=1",
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(w.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["loss_trace"].as_array().unwrap().len(), 2);

    let pred = tmp.path().join("pred");
    ok(&["infer", "--config", &cfg, "--weights", s(&w), "--data", s(&data.join("val")), "--out", s(&pred)]);
    let p: Value = serde_json::from_str(&std::fs::read_to_string(pred.join("detections.json")).unwrap()).unwrap();
    assert_eq!(p["modalities"], "R");

    let ev = tmp.path().join("ev");
    ok(&["eval", "--config", &cfg, "--pred", s(&pred), "--gt", s(&data.join("val")), "--out", s(&ev)]);

    let figs = tmp.path().join("figs");
    ok(&["plot", "--report", s(&ev.join("report.json")), "--out", s(&figs)]);
    let names: Vec<String> = std::fs::read_dir(&figs).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().any(|n| n.ends_with(".svg")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with(".csv")), "{names:?}");

    let heat = tmp.path().join("heat");
    ok(&["plot", "--weights", s(&w), "--data", s(&data.join("val")), "--out", s(&heat)]);
    let ppm: Vec<_> = std::fs::read_dir(&heat).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "ppm")).collect();
    assert_eq!(ppm.len(), 1);
    let bytes = std::fs::read(&ppm[0]).unwrap();
    assert!(bytes.starts_with(b"P6\n40 70\n255\n"));
}
