use std::path::Path;
use std::process::{Command, Output};

use nnad::assign::{AnchorState, TargetRecord};
use nnad::eval::MetricsReport;
use nnad::geom::{iou, make_anchor_grid, template_preset, BBox};
use serde_json::Value;

fn nnad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.trim()).expect("stderr is one JSON object");
    assert!(v["error"].is_string() && v["kind"].is_string(), "{v}");
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn anchors_reports_the_preset_lattice() {
    let v = stdout_json(&nnad(&["anchors", "--image", "64x64"]));
    assert_eq!(v["templates"], 145);
    assert_eq!(v["rows"], 8);
    assert_eq!(v["cols"], 8);
    assert_eq!(v["anchors"], 9280);
}

#[test]
fn anchors_dump_has_one_line_per_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("anchors.jsonl");
    stdout_json(&nnad(&["anchors", "--image", "32x24", "--dump", s(&dump)]));
    let text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(text.lines().count(), 4 * 3 * 145);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["index"], 0);
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Value {
    serde_json::json!([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
}

#[test]
fn assign_marks_doubly_overlapped_anchors_inactive() {
    // two overlapping cars of similar size: some anchors overlap both well
    let dir = tempfile::tempdir().unwrap();
    let a = BBox::new(16.0, 20.0, 40.0, 44.0);
    let b = BBox::new(24.0, 20.0, 48.0, 44.0);
    let ann = serde_json::json!({
        "imgWidth": 64, "imgHeight": 64,
        "objects": [
            {"label": "car", "polygon": rect(a.x_min, a.y_min, a.x_max, a.y_max)},
            {"label": "car", "polygon": rect(b.x_min, b.y_min, b.x_max, b.y_max)},
        ]
    });
    let path = dir.path().join("scene.json");
    std::fs::write(&path, ann.to_string()).unwrap();
    let out = dir.path().join("targets.jsonl");
    let v = stdout_json(&nnad(&["assign", "--annotation", s(&path), "--out", s(&out)]));
    assert_eq!(v["objects"], 2);
    assert_eq!(v["anchors"], 9280);

    let records: Vec<TargetRecord> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let grid = make_anchor_grid(64, 64, 8, &template_preset("paper-table1").unwrap()).unwrap();
    let mut ambiguous = 0;
    for r in &records {
        let anchor = grid.boxes()[r.anchor_index];
        let (ia, ib) = (iou(&anchor, &a), iou(&anchor, &b));
        let (hi, lo) = (ia.max(ib), ia.min(ib));
        if lo >= 0.4 && hi - lo < 0.2 && !grid.is_outside(r.anchor_index) {
            ambiguous += 1;
            assert_eq!(r.state, AnchorState::Inactive, "anchor {}", r.anchor_index);
        }
    }
    assert!(ambiguous > 0, "fixture has no ambiguous anchors");
    let active = records.iter().filter(|r| r.state == AnchorState::Active).count();
    assert_eq!(v["active"], active);
}

#[test]
fn eval_seg_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout_json(&nnad(&["synth", "--out", s(&data), "--count", "2", "--seed", "3"]));
    let gts: Vec<String> = (0..2)
        .map(|i| s(&data.join(format!("scene_{i:03}_labels.pgm"))).to_string())
        .collect();
    let insts: Vec<String> = (0..2)
        .map(|i| s(&data.join(format!("scene_{i:03}_instances.pgm"))).to_string())
        .collect();
    let report = dir.path().join("seg.json");
    let mut args = vec!["eval-seg", "--pred", &gts[0], &gts[1], "--gt", &gts[0], &gts[1], "--instances"];
    args.extend(insts.iter().map(String::as_str));
    args.extend(["--out", s(&report)]);
    stdout_json(&nnad(&args));
    let m = MetricsReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(m.mean_iou, Some(1.0));
    assert_eq!(m.mean_iiou, Some(1.0));
    assert_eq!(m.pixel_accuracy, Some(1.0));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    stdout_json(&nnad(&["synth", "--out", s(&a), "--count", "3", "--seed", "11"]));
    stdout_json(&nnad(&["synth", "--out", s(&b), "--count", "3", "--seed", "11"]));
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
    }
}

#[test]
fn usage_errors_are_json_with_exit_2() {
    let out = nnad(&["anchors", "--image", "64by64"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "usage");
    let out = nnad(&["eval-det", "--detections", "d", "--annotations", "a", "--out", "o", "--iou", "car=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(nnad(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn failures_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("targets.jsonl");

    let missing = nnad(&["assign", "--annotation", s(&dir.path().join("nope.json")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
    error_json(&missing);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"imgWidth": 64, "imgHeight": 64, "objects": [{"label": "car", "polygon": []}]}"#).unwrap();
    let e = error_json(&nnad(&["assign", "--annotation", s(&bad), "--out", s(&out)]));
    assert!(e["error"].as_str().unwrap().contains("empty polygon"), "{e}");

    std::fs::write(&bad, r#"{"imgWidth": 64, "imgHeight": 64, "objects": [{"label": "zebra", "polygon": [[1,1],[5,5]]}]}"#).unwrap();
    error_json(&nnad(&["assign", "--annotation", s(&bad), "--out", s(&out)]));

    let ck = dir.path().join("model.nnad");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let img = dir.path().join("img.ppm");
    std::fs::write(&img, b"P6\n1 1\n255\n\0\0\0").unwrap();
    let dets = dir.path().join("dets.jsonl");
    error_json(&nnad(&["detect", "--checkpoint", s(&ck), "--images", s(&img), "--out", s(&dets)]));

    let remaining: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "bad.json" && n != "model.nnad" && n != "img.ppm")
        .collect();
    assert!(remaining.is_empty(), "left behind: {remaining:?}");
}

#[test]
fn selftest_quick_passes() {
    let out = nnad(&["selftest", "--quick"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
