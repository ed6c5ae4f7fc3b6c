use std::fs;
use std::path::PathBuf;

use mssnet::keypoints::{Keypoint, Point};
use mssnet::synth::{self, GenParams, ANNOTATION_FILE, IMAGE_DIR};
use mssnet::Tensor;

const FIXTURE: &str = include_str!("fixtures/one_sample/annotations.json");

/// Copies an annotation text into a temp dir next to a flat grey image.
fn stage(json: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join(IMAGE_DIR)).unwrap();
    let image = Tensor::<f32>::full(&[3, 64, 64], 0.25);
    fs::write(dir.path().join(IMAGE_DIR).join("fixture01.msst"), image.encode()).unwrap();
    let path = dir.path().join(ANNOTATION_FILE);
    fs::write(&path, json).unwrap();
    (dir, path)
}

#[test]
fn hand_written_fixture_parses_to_known_values() {
    let (_dir, path) = stage(FIXTURE);
    let samples = synth::load_annotations(&path).unwrap();
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!(s.id, "fixture01");
    assert_eq!(s.label.head_size, 7.0);
    assert_eq!(s.label.torso_size, 19.0);
    assert_eq!(s.image.shape(), &[3, 64, 64]);
    assert!(s.image.data().iter().all(|&v| v == 0.25));

    let k = s.keypoints();
    assert_eq!(k.point(Keypoint::Head), Point::new(32.0, 9.5));
    assert_eq!(k.point(Keypoint::LeftElbow), Point::new(41.0, 26.5));
    assert_eq!(k.point(Keypoint::RightAnkle), Point::new(26.0, 57.5));
    assert!(!k.is_visible(Keypoint::RightAnkle));
    assert!(k.is_occluded(Keypoint::LeftElbow));
    let occluded: Vec<Keypoint> = Keypoint::ALL.into_iter().filter(|&p| k.is_occluded(p)).collect();
    assert_eq!(occluded, vec![Keypoint::LeftElbow]);
    let recoverable: Vec<Keypoint> = k.recoverable_occluded().collect();
    assert_eq!(recoverable, vec![Keypoint::LeftElbow]);
}

#[test]
fn missing_keypoint_field_is_named() {
    let broken = FIXTURE.replacen(r#", "visible": true, "occluded": false }"#, r#", "occluded": false }"#, 1);
    assert_ne!(broken, FIXTURE);
    let (_dir, path) = stage(&broken);
    let msg = synth::load_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("visible"), "{msg}");
    assert!(msg.contains("line 8"), "{msg}");
}

#[test]
fn missing_sample_field_is_named() {
    let broken = FIXTURE.replace("    \"torso_size\": 19.0,\n", "");
    let (_dir, path) = stage(&broken);
    let msg = synth::load_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("torso_size"), "{msg}");
}

#[test]
fn wrong_keypoint_name_or_count_is_reported() {
    let (_dir, path) = stage(&FIXTURE.replace("\"l_knee\"", "\"knee\""));
    let msg = synth::load_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("keypoints[12].name"), "{msg}");

    let short = FIXTURE.replace(
        ",\n      { \"name\": \"r_ankle\", \"x\": 26.0, \"y\": 57.5, \"visible\": false, \"occluded\": false }",
        "",
    );
    assert_ne!(short, FIXTURE);
    let (_dir, path) = stage(&short);
    let msg = synth::load_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("15 entries"), "{msg}");
}

#[test]
fn field_order_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth::generate(&GenParams::default(), 1).unwrap();
    let path = synth::save_annotations(&samples, dir.path()).unwrap();
    let text = fs::read_to_string(path).unwrap();
    let order = ["\"id\"", "\"image_file\"", "\"head_size\"", "\"torso_size\"", "\"keypoints\"", "\"name\"", "\"x\"", "\"y\"", "\"visible\"", "\"occluded\""];
    let pos: Vec<usize> = order.iter().map(|k| text.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{pos:?}");
    assert_eq!(text.matches("\"name\"").count(), 16);
}

fn assert_same(a: &[synth::PoseSample], b: &[synth::PoseSample]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image, y.image);
        assert_eq!(x.label, y.label);
    }
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams {
        seed: 5,
        ..GenParams::default()
    };
    let samples = synth::generate(&params, 12).unwrap();
    let path = synth::save_annotations(&samples, dir.path()).unwrap();
    assert_eq!(path, dir.path().join(ANNOTATION_FILE));
    assert_same(&samples, &synth::load_annotations(&path).unwrap());
}

#[test]
fn generation_is_bitwise_deterministic() {
    let params = GenParams {
        seed: 7,
        ..GenParams::default()
    };
    let a = synth::generate(&params, 3).unwrap();
    let b = synth::generate(&params, 3).unwrap();
    assert_same(&a, &b);
    let bits = |s: &[synth::PoseSample]| -> Vec<u32> { s.iter().flat_map(|x| x.image.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn occlusion_slice_targets_elbows_and_knees() {
    let params = GenParams {
        seed: 9,
        ..GenParams::default()
    }
    .occlusion_slice();
    let samples = synth::generate(&params, 40).unwrap();
    let limbs = [Keypoint::LeftElbow, Keypoint::RightElbow, Keypoint::LeftKnee, Keypoint::RightKnee];
    let mut recoverable = 0;
    for s in &samples {
        assert_eq!(s.occluders.len(), 1);
        let hit: Vec<Keypoint> = s.keypoints().recoverable_occluded().collect();
        recoverable += hit.iter().filter(|k| limbs.contains(k)).count();
    }
    assert!(recoverable >= 30, "{recoverable} recoverable elbow/knee occlusions in 40 samples");
}

#[test]
fn split_partitions_input() {
    let ids: Vec<usize> = (0..100).collect();
    let (a, b) = synth::split(&ids, 0.8, 3).unwrap();
    assert_eq!((a.len(), b.len()), (80, 20));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, ids);
    assert!(synth::split(&ids, 1.5, 3).is_err());
}
