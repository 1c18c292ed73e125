use std::fs;
use std::path::Path;

use image::GrayImage;
use serde_json::json;
use sspsd_core::dataset::{generate_synthetic, load_annotations, save_annotations, write_json, RESERVED_FILES};
use sspsd_core::Error;

fn write_record(dir: &Path, name: &str, record: serde_json::Value) {
    GrayImage::new(512, 512).save(dir.join(format!("{name}.png"))).unwrap();
    write_json(&dir.join(format!("{name}.json")), &record).unwrap();
}

fn record(x: f64) -> serde_json::Value {
    json!({
        "image": "img.png",
        "scene": "outdoor_daylight",
        "points": [
            { "x": x, "y": 100.0, "theta1": 0.0, "theta2": 90.0, "shape": "L", "type": "perpendicular" },
            { "x": 300.0, "y": 100.0, "theta1": 180.0, "theta2": 90.0, "shape": "L", "type": "perpendicular" }
        ],
        "slots": [{ "p1": 0, "p2": 1, "theta_s": 0.0, "type": "perpendicular" }]
    })
}

fn with_image(mut rec: serde_json::Value, name: &str) -> serde_json::Value {
    rec["image"] = json!(format!("{name}.png"));
    rec
}

#[test]
fn three_valid_records_load_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b", "c", "a"] {
        write_record(dir.path(), name, with_image(record(100.0), name));
    }
    let data = load_annotations(dir.path()).unwrap();
    let names: Vec<&str> = data.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    let gt = data[0].ground_truth().unwrap();
    assert_eq!((gt.points.len(), gt.slots.len()), (2, 1));
    assert_eq!(gt.slots[0].p2, [300.0, 100.0]);
}

#[test]
fn point_outside_image_is_a_schema_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_record(dir.path(), "bad", with_image(record(600.0), "bad"));
    match load_annotations(dir.path()) {
        Err(Error::Schema { file, message }) => {
            assert!(file.ends_with("bad.json"), "{file}");
            assert!(message.contains("600"), "{message}");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn slot_citing_missing_point_is_dangling() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = with_image(record(100.0), "x");
    rec["slots"][0]["p2"] = json!(7);
    write_record(dir.path(), "x", rec);
    assert!(matches!(
        load_annotations(dir.path()),
        Err(Error::DanglingSlotRef { index: 7, .. })
    ));
}

#[test]
fn unknown_fields_and_scene_tags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = with_image(record(100.0), "x");
    rec["scene"] = json!("underwater");
    write_record(dir.path(), "x", rec);
    assert!(matches!(load_annotations(dir.path()), Err(Error::Schema { .. })));

    let dir = tempfile::tempdir().unwrap();
    let mut rec = with_image(record(100.0), "y");
    rec["weather"] = json!("sunny");
    write_record(dir.path(), "y", rec);
    assert!(matches!(load_annotations(dir.path()), Err(Error::Schema { .. })));
}

#[test]
fn synthetic_set_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sspsd_core::dataset::SynthConfig {
        n_images: 12,
        ..Default::default()
    };
    let original = generate_synthetic(&cfg, 3).unwrap();
    save_annotations(dir.path(), &original).unwrap();
    // a config snapshot living next to the records is not an annotation
    fs::write(dir.path().join(RESERVED_FILES[0]), "{\"command\": \"synth\"}").unwrap();
    let loaded = load_annotations(dir.path()).unwrap();
    assert_eq!(loaded.len(), original.len());
    for (a, b) in original.iter().zip(&loaded) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        let (ga, gb) = (a.ground_truth().unwrap(), b.ground_truth().unwrap());
        assert_eq!(ga.points.len(), gb.points.len());
        assert_eq!(ga.slots.len(), gb.slots.len());
        for (p, q) in ga.points.iter().zip(&gb.points) {
            for (u, v) in [(p.x, q.x), (p.y, q.y), (p.theta1, q.theta1), (p.theta2, q.theta2)] {
                assert!((u - v).abs() <= 1e-6);
            }
            assert_eq!((p.shape, p.ptype), (q.shape, q.ptype));
        }
        for (s, t) in ga.slots.iter().zip(&gb.slots) {
            assert!((s.theta_s - t.theta_s).abs() <= 1e-6);
            assert!((s.p1[0] - t.p1[0]).abs() <= 1e-6 && (s.p2[1] - t.p2[1]).abs() <= 1e-6);
            assert_eq!(s.ptype, t.ptype);
        }
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    assert!(matches!(
        load_annotations(Path::new("/nonexistent/sspsd")),
        Err(Error::Io { .. })
    ));
}
