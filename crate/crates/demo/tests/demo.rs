use pyramid_ssl_demo::{augment_preview, pyramid_shapes, sample_crops};
use serde_json::{json, Value};

#[test]
fn crops_respect_iou_floor() {
    let v: Value = serde_json::from_str(&sample_crops(vec![64, 64, 48], 0.3, 4, 7).unwrap()).unwrap();
    assert!(v["iou"].as_f64().unwrap() >= 0.3);
    assert_eq!(v["locals"].as_array().unwrap().len(), 4);
}

#[test]
fn preview_keeps_image_size() {
    let v: Value = serde_json::from_str(&augment_preview(3, 32, 1.0).unwrap()).unwrap();
    for k in ["original", "global", "local"] {
        assert_eq!(v[k]["height"], 32, "{k}");
    }
}

#[test]
fn shapes_for_a_radiograph() {
    let v: Value = serde_json::from_str(&pyramid_shapes(false, vec![224, 224]).unwrap()).unwrap();
    assert_eq!(v["bottleneck"], json!([1, 7, 7]));
}
