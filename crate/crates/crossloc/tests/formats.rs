use std::path::Path;

use crossloc::anchors_file::{format_anchors, read_anchors, write_anchors};
use crossloc::annotations::{load_annotations, read_records, save_dataset, write_records, Record};
use crossloc::checkpoint::{self, FORMAT_VERSION, MAGIC};
use crossloc::config::{RunConfig, CONFIG_VERSION};
use crossloc::experiments::fit_anchors;
use crossloc::report::{read_report, report_table, write_report};
use crossloc::Error;
use crossloc_core::dataset::Split;
use crossloc_core::detection::AnchorSet;
use crossloc_core::eval::{format_percent, EvalReport};
use crossloc_core::model::{Model, ModelConfig};
use crossloc_core::synth::{generate, SyntheticSpec};

fn small_spec(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: n,
        query_size: 32,
        reference_size: 64,
        ..SyntheticSpec::default()
    }
}

fn micro_model(seed: u64) -> Model {
    let anchors = AnchorSet::new((2..=10).map(|i| (i as f64 * 0.6, i as f64 * 0.5)).collect()).unwrap();
    Model::new(
        ModelConfig {
            seed,
            ..ModelConfig::micro()
        },
        anchors,
    )
    .unwrap()
}

#[test]
fn dataset_round_trips_through_png_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = generate(&small_spec(3), 0, Split::Train).unwrap();
    samples[2].split = Split::Test;
    let path = save_dataset(dir.path(), &samples).unwrap();
    let back = load_annotations(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.click, b.click);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.split, b.split);
        // Pixels are 8-bit on both sides of the round trip.
        assert_eq!(a.query, b.query);
        assert_eq!(a.reference, b.reference);
    }
}

#[test]
fn bad_annotation_lines_are_reported_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ann.jsonl");
    let good = Record {
        id: "a".into(),
        query_path: "q.png".into(),
        click_xy: [1.0, 2.0],
        reference_path: "r.png".into(),
        bbox_xywh: [10.0, 10.0, 4.0, 4.0],
        split: Split::Train,
    };
    write_records(&path, std::slice::from_ref(&good)).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    text.push_str("{\"id\": \"b\"}\n");
    text.push_str(&serde_json::to_string(&good).unwrap());
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    match read_records(&path) {
        Err(Error::Annotations { errors, .. }) => {
            let lines: Vec<usize> = errors.iter().map(|e| e.line).collect();
            assert_eq!(lines, [3, 4]);
            assert!(errors[1].message.contains("duplicate"));
        }
        other => panic!("expected annotation errors, got {other:?}"),
    }
}

#[test]
fn missing_image_is_a_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ann.jsonl");
    let r = Record {
        id: "a".into(),
        query_path: "nope_q.png".into(),
        click_xy: [1.0, 2.0],
        reference_path: "nope_r.png".into(),
        bbox_xywh: [10.0, 10.0, 4.0, 4.0],
        split: Split::Val,
    };
    write_records(&path, &[r]).unwrap();
    match load_annotations(&path) {
        Err(Error::Annotations { errors, .. }) => assert_eq!(errors[0].line, 1),
        other => panic!("expected annotation errors, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = micro_model(3);
    let echo = serde_json::json!({"note": "x"});
    checkpoint::save(&path, &model, &echo).unwrap();
    let (back, echo_back) = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(echo_back, echo);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
}

#[test]
fn checkpoint_version_and_corruption_are_rejected() {
    let model = micro_model(0);
    let mut bytes = checkpoint::encode(&model, &serde_json::Value::Null);
    let p = Path::new("m.ckpt");

    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        checkpoint::decode(&wrong, p),
        Err(Error::Version { found, expected, .. }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));

    let mut magic = bytes.clone();
    magic[0] = b'Y';
    assert!(matches!(checkpoint::decode(&magic, p), Err(Error::Format { .. })));

    bytes.truncate(bytes.len() - 3);
    assert!(matches!(checkpoint::decode(&bytes, p), Err(Error::Format { .. })));
}

#[test]
fn anchors_file_has_nine_sorted_lines_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(&small_spec(40), 0, Split::Train).unwrap();
    let a = fit_anchors(&samples, 50, 0).unwrap();
    let b = fit_anchors(&samples, 50, 0).unwrap();
    assert_eq!(format_anchors(&a), format_anchors(&b));
    let path = dir.path().join("anchors.txt");
    write_anchors(&path, &a).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 9);
    let areas: Vec<f64> = a.as_slice().iter().map(|(w, h)| w * h).collect();
    assert!(areas.windows(2).all(|p| p[0] <= p[1]));
    assert_eq!(read_anchors(&path).unwrap(), a);
}

#[test]
fn malformed_anchor_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("anchors.txt");
    std::fs::write(&path, "1 2\n3 x\n").unwrap();
    let err = read_anchors(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

fn report(ious: &[f64]) -> EvalReport {
    EvalReport::from_ious(ious.iter().enumerate().map(|(i, &v)| (format!("s{i}"), v)).collect()).unwrap()
}

#[test]
fn report_renders_two_decimal_percent_and_round_trips() {
    assert_eq!(format_percent(0.4615), "46.15");
    let r = report(&[0.9, 0.3, 0.1, 0.5]);
    assert_eq!(r.accu_05, 0.5);
    assert_eq!(r.accu_025, 0.75);
    let dir = tempfile::tempdir().unwrap();
    let (json, txt) = write_report(&r, dir.path(), "report").unwrap();
    assert_eq!(read_report(&json).unwrap(), r);
    let table = std::fs::read_to_string(txt).unwrap();
    assert_eq!(table, report_table(&r));
    assert!(table.contains("75.00") && table.contains("50.00"));
}

#[test]
fn config_file_round_trips_through_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    assert_eq!(cfg.version, CONFIG_VERSION);
    let path = cfg.write_echo(dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v, cfg.echo());
    assert_eq!(v["model"]["k"], 4);
}
