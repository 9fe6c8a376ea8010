use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn maskeval(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_maskeval"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> String {
    let r = maskeval(args);
    assert_eq!(r.code, 0, "{args:?}\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_json(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

/// Small synthetic corpus shared by the recognition tests.
fn corpus(dir: &Path, subjects: &str, frames: &str) -> PathBuf {
    let out = dir.join("corpus");
    ok(&["synth", "--out", s(&out), "--subjects", subjects, "--frames", frames, "--seed", "5"]);
    out.join("manifest.csv")
}

fn gt_box(image: &str, x: f64, y: f64) -> Value {
    json!({"image_path": image, "class_id": 0, "x": x, "y": y, "w": 10.0, "h": 10.0})
}

fn det_box(image: &str, x: f64, y: f64, score: f64) -> Value {
    json!({"image_path": image, "class_id": 0, "score": score, "x": x, "y": y, "w": 10.0, "h": 10.0})
}

fn detect_map(dir: &Path, gts: Value, dets: Value) -> Value {
    let g = write_json(dir, "gt.json", gts);
    let d = write_json(dir, "det.json", dets);
    let v: Value = serde_json::from_str(&ok(&["detect-eval", "--gt", s(&g), "--detections", s(&d)])).unwrap();
    v["result"].clone()
}

#[test]
fn detect_eval_perfect_one_false_positive_and_silent() {
    let dir = tempfile::tempdir().unwrap();
    let gts = json!([gt_box("a.png", 0.0, 0.0), gt_box("a.png", 50.0, 50.0), gt_box("b.png", 5.0, 5.0)]);

    let perfect = json!([
        det_box("a.png", 0.0, 0.0, 0.9),
        det_box("a.png", 50.0, 50.0, 0.8),
        det_box("b.png", 5.0, 5.0, 0.7)
    ]);
    let r = detect_map(dir.path(), gts.clone(), perfect);
    assert_eq!(r["mAP"], 1.0);
    assert_eq!(r["per_threshold"].as_array().unwrap().len(), 10);

    // ranks: TP, FP, TP, TP over 3 gts -> PR points (1/3, 1), (1/3, 1/2), (2/3, 2/3), (1, 3/4);
    // envelope 1 on [0, 1/3], 3/4 on (1/3, 1] -> AP = 1/3 + 2/3 * 3/4 = 5/6
    let one_fp = json!([
        det_box("a.png", 0.0, 0.0, 0.9),
        det_box("b.png", 80.0, 80.0, 0.8),
        det_box("a.png", 50.0, 50.0, 0.7),
        det_box("b.png", 5.0, 5.0, 0.6)
    ]);
    let r = detect_map(dir.path(), gts.clone(), one_fp);
    assert!((r["mAP"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12, "{}", r["mAP"]);

    let r = detect_map(dir.path(), gts, json!([]));
    assert_eq!(r["mAP"], 0.0);
    let counts = &r["per_threshold"][0]["counts"];
    assert_eq!(counts["fn_"].as_u64().or(counts["fn"].as_u64()), Some(3));
    assert_eq!(counts["tp"], 0);
}

#[test]
fn detect_eval_rejects_missing_score_and_bad_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_json(dir.path(), "gt.json", json!([gt_box("a.png", 0.0, 0.0)]));
    let d = write_json(dir.path(), "det.json", json!([gt_box("a.png", 0.0, 0.0)]));
    let r = maskeval(&["detect-eval", "--gt", s(&g), "--detections", s(&d)]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.starts_with("maskeval: input error:"), "{}", r.stderr);
    let r = maskeval(&["detect-eval", "--gt", s(&g), "--detections", s(&g), "--iou-thresholds", "1.5"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn preprocess_is_deterministic_and_face_sized() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "3", "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["preprocess", "--manifest", s(&manifest), "--out", s(out), "--ops", "rescale,periocular", "--seed", "9"]);
    }
    let img = "visual_masked/subj001_01.png";
    let (x, y) = (std::fs::read(a.join(img)).unwrap(), std::fs::read(b.join(img)).unwrap());
    assert_eq!(x, y);
    assert_eq!(read_json(&a.join("provenance.json"))["result"], read_json(&b.join("provenance.json"))["result"]);
    let decoded = image::load_from_memory(&x).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (256, 256));
    // border cells are always blacked out
    assert_eq!(decoded.to_luma8().get_pixel(3, 3).0[0], 0);
    let prov = read_json(&a.join("provenance.json"));
    assert_eq!(prov["result"]["images"], 24);
    assert!(a.join("manifest.csv").exists());
}

#[test]
fn preprocess_hybrid_seam() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "2", "1");
    let out = dir.path().join("h");
    ok(&["preprocess", "--manifest", s(&manifest), "--out", s(&out), "--ops", "hybrid"]);
    let root = manifest.parent().unwrap();
    let hybrid = image::open(out.join("hybrid/subj000_000.png")).unwrap().to_luma8();
    let visual = image::open(root.join("visual_masked/subj000_00.png")).unwrap().to_luma8();
    let thermal = image::open(root.join("thermal/subj000_00.png")).unwrap().to_luma8();
    for y in 0..256 {
        let src = if y < 128 { &visual } else { &thermal };
        for x in 0..256 {
            assert_eq!(hybrid.get_pixel(x, y), src.get_pixel(x, y), "({x}, {y})");
        }
    }
    assert!(!out.join("manifest.csv").exists());
}

#[test]
fn preprocess_hybrid_reports_missing_pair() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "2", "1");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("thermal")).collect();
    std::fs::write(&manifest, kept.join("\n") + "\n").unwrap();
    let r = maskeval(&["preprocess", "--manifest", s(&manifest), "--out", s(&dir.path().join("h")), "--ops", "hybrid"]);
    assert_eq!(r.code, 4, "{}", r.stderr);
}

#[test]
fn split_holdout_and_kfold() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "10", "1");
    let plan: Value = serde_json::from_str(&ok(&["split", "--manifest", s(&manifest)])).unwrap();
    let parts = plan["assignments"].as_object().unwrap();
    assert_eq!(parts.len(), 10);
    let count = |p: &str| parts.values().filter(|v| *v == p).count();
    assert_eq!((count("train"), count("validation"), count("test")), (7, 2, 1));

    let plans: Value = serde_json::from_str(&ok(&["split", "--manifest", s(&manifest), "--mode", "kfold", "--folds", "5"])).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 5);
}

#[test]
fn verify_matching_condition_wins_each_column_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "10", "3");
    let (a, b) = (dir.path().join("va"), dir.path().join("vb"));
    for out in [&a, &b] {
        ok(&["verify", "--manifest", s(&manifest), "--folds", "5", "--seed", "4", "--out", s(out)]);
    }
    for f in ["verification.txt", "fold_results.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // the envelopes differ only in the --out value they record
    assert_eq!(read_json(&a.join("verification.json"))["result"], read_json(&b.join("verification.json"))["result"]);
    let report = read_json(&a.join("verification.json"));
    let cells = &report["result"]["matrix"]["cells"];
    for col in 0..3 {
        let diag = cells[col][col]["mean"].as_f64().unwrap();
        for row in 0..3 {
            assert!(diag >= cells[row][col]["mean"].as_f64().unwrap(), "column {col}");
        }
    }
}

#[test]
fn verify_single_fold_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "6", "2");
    let plan = dir.path().join("plan.json");
    ok(&["split", "--manifest", s(&manifest), "--fractions", "0.5,0.34,0.16", "--out", s(&plan)]);
    let out = dir.path().join("v");
    ok(&["verify", "--manifest", s(&manifest), "--plan", s(&plan), "--out", s(&out)]);
    let report = read_json(&out.join("verification.json"));
    for row in report["result"]["matrix"]["cells"].as_array().unwrap() {
        for cell in row.as_array().unwrap() {
            assert_eq!(cell["std"], 0.0);
        }
    }
}

#[test]
fn identify_diagonal_leads_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "6", "3");
    let out = dir.path().join("i");
    ok(&["identify", "--manifest", s(&manifest), "--folds", "3", "--out", s(&out)]);
    let report = read_json(&out.join("identification.json"));
    let cells = report["result"]["matrix"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 5);
    for (r, row) in cells.iter().enumerate() {
        let diag = row[r]["mean"].as_f64().unwrap();
        for cell in row.as_array().unwrap() {
            assert!(diag >= cell["mean"].as_f64().unwrap(), "row {r}");
        }
    }
}

#[test]
fn identify_reference_tables() {
    let out = ok(&["identify", "--reference-tables", "true"]);
    assert!(out.contains("= 0.5793"), "{out}");
    assert!(out.contains("= 0.6844"), "{out}");
}

#[test]
fn checkpoint_routes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "3", "1");
    let root = manifest.parent().unwrap();

    let missing = dir.path().join("no_such_thermal.png");
    let out = dir.path().join("cp_unmasked");
    ok(&[
        "checkpoint",
        "--visual", s(&root.join("visual/subj002_00.png")),
        "--thermal", s(&missing),
        "--manifest", s(&manifest),
        "--gallery", s(&manifest),
        "--out", s(&out),
    ]);
    let trace = &read_json(&out.join("trace.json"))["result"]["trace"];
    assert_eq!(trace["route"], "visual");
    assert_eq!(trace["thermal_loaded"], false);
    assert_eq!(trace["identity"], "subj002");
    assert!(!out.join("hybrid.png").exists());

    let out = dir.path().join("cp_masked");
    ok(&[
        "checkpoint",
        "--visual", s(&root.join("visual_masked/subj001_00.png")),
        "--thermal", s(&root.join("thermal/subj001_00.png")),
        "--manifest", s(&manifest),
        "--gallery", s(&manifest),
        "--out", s(&out),
    ]);
    let trace = &read_json(&out.join("trace.json"))["result"]["trace"];
    assert_eq!(trace["route"], "hybrid");
    assert_eq!(trace["hybrid_built"], true);
    assert_eq!(trace["identity"], "subj001");
    assert!(out.join("hybrid.png").exists());

    let r = maskeval(&[
        "checkpoint",
        "--visual", s(&root.join("visual_masked/subj001_00.png")),
        "--thermal", s(&missing),
        "--masked", "true",
        "--gallery", s(&manifest),
    ]);
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn report_from_fold_results() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("folds.csv");
    std::fs::write(&csv, "train_cond,test_cond,fold,accuracy\na,a,0,1.0\na,a,1,0.9\na,c,0,0.6\na,c,1,0.5\n").unwrap();
    let out = ok(&["report", "--fold-results", s(&csv), "--baseline", "a:a", "--degraded", "a:c"]);
    assert!(out.contains("0.9500 ± 0.0500"), "{out}");
    assert!(out.contains("a:a -> a:c: 0.4000"), "{out}");
    let reference = ok(&["report"]);
    for d in ["0.3678", "0.3634", "0.5793", "0.6844"] {
        assert!(reference.contains(d), "{d}");
    }
}

#[test]
fn grad_check_passes_and_fails_on_impossible_tolerance() {
    let out = ok(&["grad-check", "--points", "20"]);
    assert_eq!(out.matches("PASS").count(), 5, "{out}");
    let r = maskeval(&["grad-check", "--loss", "bce", "--points", "5", "--tol", "1e-15"]);
    assert_eq!(r.code, 6, "{}", r.stdout);
    assert!(r.stderr.starts_with("maskeval: check error:"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# grad-check settings\npoints = 3\nloss = contrastive\n").unwrap();
    let out = ok(&["grad-check", "--config", s(&cfg)]);
    assert!(out.contains("contrastive") && out.contains("      3"), "{out}");
    let out = ok(&["grad-check", "--config", s(&cfg), "--loss", "bce"]);
    assert!(out.contains("bce") && !out.contains("contrastive"), "{out}");

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let r = maskeval(&["grad-check", "--config", s(&cfg)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("unknown key"), "{}", r.stderr);
}

#[test]
fn error_categories_map_to_exit_codes() {
    let r = maskeval(&["verify"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let r = maskeval(&["verify", "--manifest", "/nonexistent/manifest.csv"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "2", "1");
    let r = maskeval(&["verify", "--manifest", s(&manifest), "--features", "sift"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.starts_with("maskeval: config error:"));
}
