use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cropdet_core::data::{load_caption_manifest, render_caption_prompt};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn detect_dir() -> PathBuf {
    fixtures().join("detect")
}

fn cropdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cropdet"))
        .args(args)
        .env("CROPDET_BACKEND_DIR", detect_dir().join("backends"))
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn detect_fixture(out: &Path, extra: &[&str]) -> Output {
    let images = detect_dir().join("images");
    let vocab = detect_dir().join("vocab.txt");
    let mut args = vec![
        "detect",
        "--images",
        s(&images),
        "--vocab",
        s(&vocab),
        "--backends",
        "fixture",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    cropdet(&args)
}

#[test]
fn detect_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let o = detect_fixture(tmp.path(), &["--render"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = std::fs::read(detect_dir().join("golden/detections.json")).unwrap();
    assert_eq!(std::fs::read(tmp.path().join("detections.json")).unwrap(), golden);
    for f in ["field_a.png", "field_b.png", "field_c.png", "legend.json"] {
        assert!(tmp.path().join("annotated").join(f).is_file(), "{f}");
    }
    let rc = read_json(&tmp.path().join("run_config.json"));
    assert_eq!(rc["command"], "detect");
    assert_eq!(rc["seed"], 0);
    assert_eq!(rc["backends"], "fixture");
}

#[test]
fn empty_vocab_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let images = detect_dir().join("images");
    let o = cropdet(&["detect", "--images", s(&images), "--vocab", " , ", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_image_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cropdet(&[
        "detect", "--images", "/no/such/photo.png", "--vocab", "tomato", "--out", s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/photo.png"), "{}", stderr(&o));
}

#[test]
fn unknown_backend_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let images = detect_dir().join("images");
    let o = cropdet(&[
        "detect", "--images", s(&images), "--vocab", "tomato", "--backends", "nope", "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn backend_failure_is_stage_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let images = detect_dir().join("images");
    let o = cropdet(&[
        "detect", "--images", s(&images), "--vocab", "tomato", "--backends", "failing", "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("refinement stage failed") && err.contains("segmenter unavailable"), "{err}");
    assert!(err.contains("field_a.png"), "{err}");
}

#[test]
fn undecodable_image_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("broken.png");
    std::fs::write(&bad, b"not a png").unwrap();
    let out = tmp.path().join("out");
    let o = cropdet(&["detect", "--images", s(&bad), "--vocab", "tomato", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("broken.png"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 11\nworkers = 2\n[pipeline]\niou_threshold = 0.4\nclass_aware_nms = false\n").unwrap();
    let out = tmp.path().join("out");
    let o = detect_fixture(&out, &["--config", s(&cfg), "--iou-threshold", "0.6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rc = read_json(&out.join("run_config.json"));
    assert_eq!(rc["seed"], 11);
    assert_eq!(rc["workers"], 2);
    assert_eq!(rc["pipeline"]["iou_threshold"], 0.6);
    assert_eq!(rc["pipeline"]["class_aware_nms"], false);

    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let o = detect_fixture(&out, &["--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn masks_are_optional() {
    let tmp = tempfile::tempdir().unwrap();
    let o = detect_fixture(tmp.path(), &["--masks"]);
    assert!(o.status.success());
    let doc = read_json(&tmp.path().join("detections.json"));
    let first = &doc["records"][0]["detections"][0];
    assert_eq!(first["mask"]["size"], serde_json::json!([96, 96]));
}

#[test]
fn classify_rigged_fixture() {
    let run = |dir: &Path| {
        let images = detect_dir().join("images");
        let o = cropdet(&[
            "classify", "--images", s(&images), "--vocab", "tomato,lemon,leaf", "--backends",
            "fixture", "--out", s(dir),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.join("classifications.json")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let text = run(a.path());
    assert_eq!(text, run(b.path()));
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let records = doc["records"].as_array().unwrap();
    // field_c is uniformly the anchored green
    assert_eq!(records[2]["image"], "field_c.png");
    assert_eq!(records[2]["class_name"], "leaf");
    for r in records {
        let sum: f64 = r["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

fn train(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train-dssa", "--synthetic", "--out", s(dir), "--embed-dim", "32"];
    args.extend_from_slice(extra);
    let o = cropdet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::read_to_string(dir.join("loss_trace.csv")).unwrap()
}

fn losses(trace: &str) -> Vec<f64> {
    trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_synthetic_reduces_loss_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--epochs", "10", "--learning-rate", "0.01", "--seed", "3"];
    let ta = train(a.path(), &flags);
    assert_eq!(ta, train(b.path(), &flags));
    let l = losses(&ta);
    assert_eq!(l.len(), 11);
    assert!(l[10] < 0.5 * l[0], "{l:?}");
    let summary = read_json(&a.path().join("train_summary.json"));
    assert_eq!(summary["steps"], 200);
    assert!(summary["heldout_accuracy"].as_f64().unwrap() >= 0.95);
}

#[test]
fn train_zero_learning_rate_is_flat() {
    let a = tempfile::tempdir().unwrap();
    let l = losses(&train(a.path(), &["--epochs", "3", "--learning-rate", "0"]));
    assert!(l.iter().all(|&x| x == l[0]), "{l:?}");
}

#[test]
fn train_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let images = detect_dir().join("images");
    let manifest = tmp.path().join("m.jsonl");
    let lines = [
        ("field_a.png", "a red tomato beside a yellow lemon", "tomato"),
        ("field_b.png", "one yellow lemon on gray", "lemon"),
        ("field_c.png", "green leaves only", "leaf"),
    ]
    .map(|(i, c, sp)| {
        format!(
            "{{\"image\":\"{i}\",\"caption\":\"{c}\",\"species\":\"{sp}\",\"split\":\"train\"}}\n"
        )
    })
    .concat();
    std::fs::write(&manifest, lines).unwrap();
    let out = tmp.path().join("out");
    let o = cropdet(&[
        "train-dssa", "--manifest", s(&manifest), "--image-root", s(&images), "--out", s(&out),
        "--epochs", "5", "--learning-rate", "0.01", "--batch-size", "3", "--embed-dim", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let l = losses(&std::fs::read_to_string(out.join("loss_trace.csv")).unwrap());
    assert!(l[5] < l[0]);
}

#[test]
fn eval_cls_hand_count() {
    let tmp = tempfile::tempdir().unwrap();
    let e = fixtures().join("eval");
    let o = cropdet(&[
        "eval-cls", "--predictions", s(&e.join("classifications.json")), "--truth",
        s(&e.join("labels.jsonl")), "--out", s(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("classification_report.json"));
    // tomato 3/3, lemon 1/3
    assert_eq!(r["correct"], 4);
    assert!((r["overall_accuracy"].as_f64().unwrap() - 4.0 / 6.0).abs() < 1e-15);
    assert!((r["per_class_mean"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((r["per_class_std"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r["confusion"], serde_json::json!([[3, 0], [2, 1]]));
    let csv = std::fs::read_to_string(tmp.path().join("classification_per_class.csv")).unwrap();
    assert!(csv.starts_with("class,support,correct,accuracy\ntomato,3,3,1\n"));
}

#[test]
fn eval_cls_perfect_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let e = fixtures().join("eval");
    // the prediction document's own labels as truths
    let labels: String = read_json(&e.join("classifications.json"))["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| format!("{{\"image\":{},\"class\":{}}}\n", r["image"], r["class_name"]))
        .collect();
    let truth = tmp.path().join("truth.jsonl");
    std::fs::write(&truth, labels).unwrap();
    let out = tmp.path().join("out");
    let o = cropdet(&[
        "eval-cls", "--predictions", s(&e.join("classifications.json")), "--truth", s(&truth),
        "--out", s(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(read_json(&out.join("classification_report.json"))["overall_accuracy"], 1.0);

    let o = cropdet(&[
        "eval-cls", "--predictions", s(&e.join("classifications.json")), "--truth",
        s(&e.join("labels_short.jsonl")), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("6 predictions but 5 labels"));
}

#[test]
fn eval_det_perfect_and_hand() {
    let e = fixtures().join("eval");
    let run = |dets: &str| {
        let tmp = tempfile::tempdir().unwrap();
        let o = cropdet(&[
            "eval-det", "--detections", s(&e.join(dets)), "--truth", s(&e.join("annotations.json")),
            "--out", s(tmp.path()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        read_json(&tmp.path().join("detection_report.json"))
    };
    let perfect = run("detections_perfect.json");
    assert_eq!(perfect["mean_ap50"], 1.0);
    assert_eq!(perfect["mean_ap75"], 1.0);

    // tomato ranks TP, FP, TP, TP over 3 truths; lemon is a single TP
    let hand = run("detections_hand.json");
    let tomato = hand["per_class"][0]["ap50"].as_f64().unwrap();
    assert!((tomato - 84.25 / 101.0).abs() < 1e-12);
    assert_eq!(hand["per_class"][1]["ap50"], 1.0);
    let mean = hand["mean_ap50"].as_f64().unwrap();
    assert!((mean - (84.25 / 101.0 + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn caption_prompt_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cropdet(&[
        "gen-captions", "--index", s(&fixtures().join("captions/index.jsonl")), "--out",
        s(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("prompts.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2]["image"], "img_003.jpg");
    assert_eq!(lines[2]["prompt"], render_caption_prompt("dragon fruit").unwrap());
}

#[test]
fn ingest_captions() {
    let tmp = tempfile::tempdir().unwrap();
    let c = fixtures().join("captions");
    let o = cropdet(&[
        "ingest-captions", "--index", s(&c.join("index.jsonl")), "--responses",
        s(&c.join("responses.jsonl")), "--out", s(tmp.path()), "--validation-fraction", "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = load_caption_manifest(tmp.path().join("captions.jsonl")).unwrap();
    let ids: Vec<&str> = manifest.iter().map(|r| r.image.as_str()).collect();
    assert_eq!(ids, ["img_001.jpg", "img_003.jpg", "img_004.jpg"]);
    let rejected = std::fs::read_to_string(tmp.path().join("rejected.jsonl")).unwrap();
    assert!(rejected.contains("img_002.jpg"));
    // tomato: round(0.5 * 2) = 1, dragon fruit: max(1, round(0.5)) = 1
    let sample = load_caption_manifest(tmp.path().join("validation_sample.jsonl")).unwrap();
    assert_eq!(sample.len(), 2);

    let o = cropdet(&[
        "ingest-captions", "--index", s(&c.join("index.jsonl")), "--responses",
        s(&c.join("responses_incomplete.jsonl")), "--out", s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("img_004.jpg"));
}

#[test]
fn inputs_are_not_modified() {
    let tmp = tempfile::tempdir().unwrap();
    let vocab = detect_dir().join("vocab.txt");
    let before = std::fs::read(&vocab).unwrap();
    let o = detect_fixture(tmp.path(), &[]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&vocab).unwrap(), before);
}
