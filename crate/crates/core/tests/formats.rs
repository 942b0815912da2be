//! Binary round trips, corruption diagnostics and JSON document handling
//! through real files.

mod common;

use common::formats;
use etp::io::checkpoint::{ln_from_checkpoint, load_checkpoint, save_checkpoint, ModelKind};
use etp::io::documents::{load_annotations, load_items, save_items, Item, VideoItems};
use etp::io::features::{read_feature_file, write_feature_file, FeatureKind};
use etp::localization::{LnConfig, LnModel};
use etp::tensor::Module;

fn run(case: fn() -> formats::Case) {
    if let Err(e) = case() {
        panic!("{e}");
    }
}

#[test]
fn feature_layout_matches_the_documented_bytes() {
    run(formats::feature_layout_by_hand);
}

#[test]
fn feature_files_round_trip_bit_exactly() {
    run(formats::feature_round_trips);
}

#[test]
fn feature_corruptions_are_rejected() {
    run(formats::feature_corruptions);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    run(formats::checkpoint_round_trips);
}

#[test]
fn checkpoint_corruptions_are_rejected() {
    run(formats::checkpoint_corruptions);
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = formats::f32_matrix(7, 5, 3);
    let path = dir.path().join("x.etpf");
    write_feature_file(&path, &m, FeatureKind::Features).unwrap();
    assert_eq!(read_feature_file(&path).unwrap(), (FeatureKind::Features, m));

    let model = LnModel::new(
        &LnConfig {
            input_dim: 4,
            num_classes: 3,
        },
        &mut common::rng(2),
    );
    let ck = dir.path().join("ln.etpm");
    save_checkpoint(&ck, ModelKind::Localization, &model).unwrap();
    let back = ln_from_checkpoint(&load_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back.params(), model.params());
    assert!(read_feature_file(&dir.path().join("missing.etpf"))
        .unwrap_err()
        .is_input_error());
}

const ANNOTATION: &str = r#"[{"video_id": "v", "num_frames": 30, "fps": 30.0, "classes": ["a", "b"],
  "instances": [{"label": "a", "start_frame": 1, "end_frame": 1},
                {"label": "b", "start_frame": 10, "end_frame": 20}]}]"#;

#[test]
fn annotations_convert_to_half_open_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.json");
    std::fs::write(&path, ANNOTATION).unwrap();
    let videos = load_annotations(&path).unwrap();
    let spans: Vec<_> = videos[0]
        .instances
        .iter()
        .map(|g| (g.interval.start(), g.interval.end(), g.label))
        .collect();
    assert_eq!(spans, vec![(0, 1, 0), (9, 20, 1)]);
}

#[test]
fn annotation_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.json");
    let cases = [
        (
            ANNOTATION.replace("\"end_frame\": 20", "\"end_frame\": 31"),
            "[0].instances[1].end_frame",
        ),
        (
            ANNOTATION.replace("\"start_frame\": 1,", "\"start_frame\": 0,"),
            "[0].instances[0].start_frame",
        ),
        (
            ANNOTATION.replace("\"label\": \"b\"", "\"label\": \"c\""),
            "[0].instances[1].label",
        ),
        (ANNOTATION.replace("\"fps\": 30.0", "\"fps\": \"fast\""), "[0].fps"),
        (ANNOTATION.replace("\"fps\"", "\"rate\""), "rate"),
    ];
    for (text, field) in cases {
        std::fs::write(&path, text).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains(field), "{field}: {err}");
    }
}

#[test]
fn items_round_trip_with_optional_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let classes = vec!["a".to_string(), "b".to_string()];
    let videos = vec![VideoItems {
        video_id: "v".into(),
        items: vec![
            Item {
                interval: common::oracles::iv(0, 5),
                label: Some(1),
                score: 0.25,
            },
            Item {
                interval: common::oracles::iv(9, 20),
                label: None,
                score: 0.75,
            },
        ],
    }];
    save_items(&path, &videos, &classes).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"start_frame\": 1") && text.contains("\"end_frame\": 5"));
    assert_eq!(load_items(&path, &classes).unwrap(), videos);
}
