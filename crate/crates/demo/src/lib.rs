//! wasm-bindgen entry points for the static page in `www/`.
//! Every function returns a JSON string so the page needs no glue beyond
//! `JSON.parse`.

use pyramid_ssl::augment::{apply_global_2d, apply_local_2d, AugmentConfig};
use pyramid_ssl::data::{synth_dataset, SynthConfig, SynthKind};
use pyramid_ssl::geometry::{iou, sub_crop, SubCropConfig};
use pyramid_ssl::layers::Dimensionality;
use pyramid_ssl::nsunet::trace_shapes;
use pyramid_ssl::seed::{self, Stream};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Global pair, bounding box and local boxes in a `d0 x d1 x d2` volume.
#[wasm_bindgen]
pub fn sample_crops(dims: Vec<usize>, iou_min: f64, num_local: usize, seed: u32) -> Result<String, JsError> {
    let dims: [usize; 3] = dims.try_into().map_err(|_| err("expected three dims"))?;
    let cfg = SubCropConfig { iou_min, num_local, ..SubCropConfig::default() };
    let mut rng = seed::rng(seed.into(), Stream::Misc, &[]);
    let r = sub_crop(dims, &cfg, &mut rng, |_| true).map_err(err)?;
    let out = json!({
        "global_a": r.global_a.to_pair(),
        "global_b": r.global_b.to_pair(),
        "bounding_box": r.bounding_box.to_pair(),
        "locals": r.locals.iter().map(|b| b.to_pair()).collect::<Vec<_>>(),
        "iou": iou(&r.global_a, &r.global_b),
    });
    Ok(out.to_string())
}

fn image_json(v: &pyramid_ssl::volume::Volume) -> Value {
    json!({ "channels": v.channels, "height": v.dims[1], "width": v.dims[2], "data": v.data })
}

/// A synthetic radiograph, its global view and the corrupted local view.
#[wasm_bindgen]
pub fn augment_preview(seed: u32, size: usize, strength: f64) -> Result<String, JsError> {
    if !(8..=256).contains(&size) {
        return Err(err("size must lie in 8..=256"));
    }
    let seed = u64::from(seed);
    let synth = SynthConfig { size_2d: size, ..SynthConfig::default() };
    let sample = synth_dataset(SynthKind::Xray2d, 1, seed, &synth).remove(0);
    let p = strength.clamp(0.0, 1.0);
    let cfg = AugmentConfig { flip_p: p, rotate_p: p, grayscale_p: p, blur_p: p, cutout_p: p, ..AugmentConfig::default() };
    let (global, gp) = apply_global_2d(&sample.payload, &cfg, seed);
    let (local, lp) = apply_local_2d(&global, &cfg, seed);
    let out = json!({
        "original": image_json(&sample.payload),
        "global": image_json(&global),
        "local": image_json(&local),
        "global_params": gp,
        "local_params": lp,
    });
    Ok(out.to_string())
}

/// Encoder stage and decoder level dims for an input of the given size.
#[wasm_bindgen]
pub fn pyramid_shapes(three_d: bool, input: Vec<usize>) -> Result<String, JsError> {
    let dim = if three_d { Dimensionality::D3 } else { Dimensionality::D2 };
    let input: [usize; 3] = match (three_d, input.as_slice()) {
        (true, &[a, b, c]) => [a, b, c],
        (false, &[h, w]) => [1, h, w],
        _ => return Err(err("expected three dims for 3D or two for 2D")),
    };
    serde_json::to_string(&trace_shapes(dim, input).map_err(err)?).map_err(err)
}
