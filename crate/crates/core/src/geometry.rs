//! Integer box algebra and the crop samplers.
//!
//! Boxes are half-open voxel ranges `[origin, origin + size)` on the
//! `(d0, d1, d2)` axes of a [`Volume`](crate::volume::Volume). IoU is
//! computed from exact voxel counts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box3 {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl Box3 {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Self {
        debug_assert!(size.iter().all(|&s| s >= 1), "box extents must be >= 1");
        Self { origin, size }
    }

    pub fn whole(shape: [usize; 3]) -> Self {
        Self::new([0; 3], shape)
    }

    pub fn end(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.size[a])
    }

    pub fn volume(&self) -> u64 {
        self.size.iter().map(|&s| s as u64).product()
    }

    pub fn intersection_volume(&self, other: &Box3) -> u64 {
        let (ea, eb) = (self.end(), other.end());
        (0..3)
            .map(|a| {
                let lo = self.origin[a].max(other.origin[a]);
                let hi = ea[a].min(eb[a]);
                hi.saturating_sub(lo) as u64
            })
            .product()
    }

    pub fn contains(&self, inner: &Box3) -> bool {
        let (eo, ei) = (self.end(), inner.end());
        (0..3).all(|a| inner.origin[a] >= self.origin[a] && ei[a] <= eo[a])
    }

    pub fn fits_in(&self, shape: [usize; 3]) -> bool {
        Box3::whole(shape).contains(self)
    }

    /// `[origin, size]` pair used by the crop dump format.
    pub fn to_pair(&self) -> [[usize; 3]; 2] {
        [self.origin, self.size]
    }
}

/// Intersection over union as an exact voxel-count ratio `(num, den)`.
pub fn iou_ratio(a: &Box3, b: &Box3) -> (u64, u64) {
    let inter = a.intersection_volume(b);
    (inter, a.volume() + b.volume() - inter)
}

pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let (n, d) = iou_ratio(a, b);
    n as f64 / d as f64
}

/// Smallest box containing both inputs.
pub fn min_bounding_box(a: &Box3, b: &Box3) -> Box3 {
    let (ea, eb) = (a.end(), b.end());
    let origin = [0, 1, 2].map(|i| a.origin[i].min(b.origin[i]));
    let end = [0, 1, 2].map(|i| ea[i].max(eb[i]));
    Box3::new(origin, [0, 1, 2].map(|i| end[i] - origin[i]))
}

fn clip_size(size: [usize; 3], limit: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| size[a].min(limit[a]).max(1))
}

fn random_box(size: [usize; 3], within: &Box3, rng: &mut impl Rng) -> Box3 {
    let origin = [0, 1, 2].map(|a| within.origin[a] + rng.random_range(0..=within.size[a] - size[a]));
    Box3::new(origin, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubCropConfig {
    pub global_sizes: Vec<[usize; 3]>,
    pub iou_min: f64,
    pub local_sizes: Vec<[usize; 3]>,
    pub num_local: usize,
    pub max_attempts: usize,
}

impl Default for SubCropConfig {
    fn default() -> Self {
        Self {
            global_sizes: vec![[64, 64, 32], [96, 96, 64], [96, 96, 96], [112, 112, 64]],
            iou_min: 0.3,
            local_sizes: vec![[8, 8, 8], [16, 16, 16], [32, 32, 16], [32, 32, 32]],
            num_local: 6,
            max_attempts: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCropResult {
    pub global_a: Box3,
    pub global_b: Box3,
    pub bounding_box: Box3,
    pub locals: Vec<Box3>,
}

/// Two global boxes with sizes drawn independently from `size_set`
/// (clipped to the volume) whose IoU is at least `iou_min`, found by
/// rejection sampling. `accept` can veto individual boxes (background
/// rejection); vetoed draws count against the same attempt budget.
pub fn sample_global_pair_with(
    volume_shape: [usize; 3],
    size_set: &[[usize; 3]],
    iou_min: f64,
    max_attempts: usize,
    rng: &mut impl Rng,
    mut accept: impl FnMut(&Box3) -> bool,
) -> Result<(Box3, Box3)> {
    if size_set.is_empty() || volume_shape.contains(&0) {
        return Err(Error::Config("global sampling needs a size set and a non-empty volume".into()));
    }
    let whole = Box3::whole(volume_shape);
    for _ in 0..max_attempts {
        let sa = clip_size(size_set[rng.random_range(0..size_set.len())], volume_shape);
        let sb = clip_size(size_set[rng.random_range(0..size_set.len())], volume_shape);
        let a = random_box(sa, &whole, rng);
        let b = random_box(sb, &whole, rng);
        if iou(&a, &b) >= iou_min && accept(&a) && accept(&b) {
            return Ok((a, b));
        }
    }
    Err(Error::SamplingExhausted {
        attempts: max_attempts,
        reason: format!("no global pair with IoU >= {iou_min} in volume {volume_shape:?}"),
    })
}

pub fn sample_global_pair(
    volume_shape: [usize; 3],
    size_set: &[[usize; 3]],
    iou_min: f64,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<(Box3, Box3)> {
    sample_global_pair_with(volume_shape, size_set, iou_min, max_attempts, rng, |_| true)
}

/// `count` boxes inside `bbox`, each sized from `size_set` then clipped.
pub fn sample_local_views(bbox: &Box3, count: usize, size_set: &[[usize; 3]], rng: &mut impl Rng) -> Vec<Box3> {
    if size_set.is_empty() {
        return vec![*bbox; count];
    }
    (0..count)
        .map(|_| {
            let size = clip_size(size_set[rng.random_range(0..size_set.len())], bbox.size);
            random_box(size, bbox, rng)
        })
        .collect()
}

/// Global pair, their bounding box, and local boxes confined to it.
pub fn sub_crop(
    volume_shape: [usize; 3],
    cfg: &SubCropConfig,
    rng: &mut impl Rng,
    accept: impl FnMut(&Box3) -> bool,
) -> Result<SubCropResult> {
    let (a, b) = sample_global_pair_with(volume_shape, &cfg.global_sizes, cfg.iou_min, cfg.max_attempts, rng, accept)?;
    let bbox = min_bounding_box(&a, &b);
    let locals = sample_local_views(&bbox, cfg.num_local, &cfg.local_sizes, rng);
    Ok(SubCropResult { global_a: a, global_b: b, bounding_box: bbox, locals })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec2D {
    /// `(x, y)`: column and row of the top-left pixel.
    pub origin: (usize, usize),
    /// `(w, h)`.
    pub size: (usize, usize),
    /// Crop area over source area, as realised after rounding.
    pub scale_fraction: f64,
    pub output_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiCropConfig {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub aspect_ratio: (f64, f64),
    pub num_global: usize,
    pub num_local: usize,
    pub output_size: usize,
    pub local_output_size: usize,
    pub max_attempts: usize,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.3, 1.0),
            local_scale: (0.05, 0.3),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            num_global: 2,
            num_local: 6,
            output_size: 224,
            local_output_size: 224,
            max_attempts: 100,
        }
    }
}

/// Random-resized-crop geometry: area fraction drawn from `scale`, log
/// aspect ratio drawn from `ratio`, position uniform. Only crops whose
/// realised (integer) area fraction lies in `scale` are returned.
pub fn random_resized_crop(
    (height, width): (usize, usize),
    scale: (f64, f64),
    ratio: (f64, f64),
    output_size: usize,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> CropSpec2D {
    let area = (height * width) as f64;
    let in_range = |w: usize, h: usize| {
        let f = (w * h) as f64 / area;
        f >= scale.0 - 1e-12 && f <= scale.1 + 1e-12
    };
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..max_attempts {
        let target = area * sample_range(rng, scale.0, scale.1);
        let aspect = sample_range(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height && in_range(w, h) {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return CropSpec2D { origin: (x, y), size: (w, h), scale_fraction: (w * h) as f64 / area, output_size };
        }
    }
    // deterministic fallback: the most square in-range crop near the middle fraction
    let mid = area * 0.5 * (scale.0 + scale.1);
    let mut best: Option<(f64, usize, usize)> = None;
    for h in 1..=height {
        let w = ((mid / h as f64).round() as usize).clamp(1, width);
        if !in_range(w, h) {
            continue;
        }
        let r = w as f64 / h as f64;
        let penalty = if r >= ratio.0 && r <= ratio.1 { 0.0 } else { 1.0 } + (r.ln()).abs();
        if best.is_none_or(|(p, _, _)| penalty < p) {
            best = Some((penalty, w, h));
        }
    }
    let (w, h) = best.map(|(_, w, h)| (w, h)).unwrap_or((width, height));
    let x = (width - w) / 2;
    let y = (height - h) / 2;
    CropSpec2D { origin: (x, y), size: (w, h), scale_fraction: (w * h) as f64 / area, output_size }
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Two global and `num_local` local crop specs for a `(height, width)` image.
pub fn multicrop_2d(image_shape: (usize, usize), cfg: &MultiCropConfig, rng: &mut impl Rng) -> (Vec<CropSpec2D>, Vec<CropSpec2D>) {
    let globals = (0..cfg.num_global)
        .map(|_| random_resized_crop(image_shape, cfg.global_scale, cfg.aspect_ratio, cfg.output_size, cfg.max_attempts, rng))
        .collect();
    let locals = (0..cfg.num_local)
        .map(|_| random_resized_crop(image_shape, cfg.local_scale, cfg.aspect_ratio, cfg.local_output_size, cfg.max_attempts, rng))
        .collect();
    (globals, locals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{self, Stream};

    fn b(o: [usize; 3], s: [usize; 3]) -> Box3 {
        Box3::new(o, s)
    }

    /// Counts shared voxels one by one.
    fn voxel_iou(a: &Box3, c: &Box3) -> (u64, u64) {
        let e = min_bounding_box(a, c);
        let (mut inter, mut uni) = (0u64, 0u64);
        let inside = |bx: &Box3, p: [usize; 3]| (0..3).all(|k| p[k] >= bx.origin[k] && p[k] < bx.origin[k] + bx.size[k]);
        for x in e.origin[0]..e.end()[0] {
            for y in e.origin[1]..e.end()[1] {
                for z in e.origin[2]..e.end()[2] {
                    let (ia, ic) = (inside(a, [x, y, z]), inside(c, [x, y, z]));
                    inter += (ia && ic) as u64;
                    uni += (ia || ic) as u64;
                }
            }
        }
        (inter, uni)
    }

    #[test]
    fn iou_hand_cases() {
        let a = b([0, 0, 0], [64, 64, 32]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b([64, 0, 0], [4, 4, 4])), 0.0);
        let c = b([32, 0, 0], [64, 64, 32]);
        assert_eq!(iou_ratio(&a, &c), (65536, 196608));
        assert_eq!(voxel_iou(&a, &c), (65536, 196608));
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bounding_box_cases() {
        let a = b([0, 0, 0], [2, 2, 2]);
        assert_eq!(min_bounding_box(&a, &a), a);
        assert_eq!(min_bounding_box(&a, &b([4, 4, 4], [2, 2, 2])), b([0, 0, 0], [6, 6, 6]));
        let outer = b([1, 1, 1], [10, 10, 10]);
        assert_eq!(min_bounding_box(&outer, &b([2, 3, 4], [3, 3, 3])), outer);
    }

    #[test]
    fn global_pair_respects_constraint() {
        let cfg = SubCropConfig::default();
        let mut rng = seed::rng(11, Stream::Misc, &[]);
        let (a, c) = sample_global_pair([128, 128, 64], &cfg.global_sizes, 0.3, 1000, &mut rng).unwrap();
        assert!(iou(&a, &c) >= 0.3);
        for bx in [a, c] {
            assert!(bx.fits_in([128, 128, 64]));
            let clipped: Vec<[usize; 3]> = cfg.global_sizes.iter().map(|s| clip_size(*s, [128, 128, 64])).collect();
            assert!(clipped.contains(&bx.size));
        }
    }

    #[test]
    fn exact_fit_volume_gives_identical_boxes() {
        let mut rng = seed::rng(1, Stream::Misc, &[]);
        let (a, c) = sample_global_pair([64, 64, 32], &[[64, 64, 32]], 0.3, 10, &mut rng).unwrap();
        assert_eq!(a, c);
        assert_eq!(iou(&a, &c), 1.0);
    }

    #[test]
    fn impossible_constraint_exhausts() {
        let mut rng = seed::rng(1, Stream::Misc, &[]);
        let err = sample_global_pair([200, 200, 200], &[[2, 2, 2]], 0.99, 50, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SamplingExhausted { attempts: 50, .. }));
    }

    #[test]
    fn local_views_saturate_small_bbox() {
        let mut rng = seed::rng(2, Stream::Misc, &[]);
        let bbox = b([3, 4, 5], [8, 8, 8]);
        let locals = sample_local_views(&bbox, 6, &SubCropConfig::default().local_sizes, &mut rng);
        assert_eq!(locals.len(), 6);
        assert!(locals.iter().all(|l| *l == bbox));
    }

    #[test]
    fn local_views_inside_bbox() {
        let cfg = SubCropConfig::default();
        let mut rng = seed::rng(3, Stream::Misc, &[]);
        let bbox = b([10, 0, 7], [96, 96, 64]);
        let locals = sample_local_views(&bbox, 6, &cfg.local_sizes, &mut rng);
        for l in &locals {
            assert!(bbox.contains(l));
            assert!(cfg.local_sizes.contains(&l.size));
        }
    }

    #[test]
    fn sub_crop_is_deterministic() {
        let cfg = SubCropConfig::default();
        let r1 = sub_crop([160, 160, 96], &cfg, &mut seed::rng(5, Stream::Views, &[1]), |_| true).unwrap();
        let r2 = sub_crop([160, 160, 96], &cfg, &mut seed::rng(5, Stream::Views, &[1]), |_| true).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.bounding_box, min_bounding_box(&r1.global_a, &r1.global_b));
    }

    #[test]
    fn multicrop_fractions_in_range() {
        let cfg = MultiCropConfig::default();
        let mut rng = seed::rng(4, Stream::Misc, &[]);
        let (g, l) = multicrop_2d((512, 512), &cfg, &mut rng);
        assert_eq!((g.len(), l.len()), (2, 6));
        for c in &g {
            assert!((0.3..=1.0).contains(&c.scale_fraction));
            assert_eq!(c.output_size, 224);
        }
        for c in &l {
            assert!((0.05..=0.3).contains(&c.scale_fraction));
            assert_eq!(c.output_size, 224);
        }
    }

    #[test]
    fn collapsed_scale_is_full_image() {
        let cfg = MultiCropConfig { global_scale: (1.0, 1.0), ..Default::default() };
        let mut rng = seed::rng(4, Stream::Misc, &[]);
        let (g, _) = multicrop_2d((300, 400), &cfg, &mut rng);
        for c in g {
            assert_eq!(c.origin, (0, 0));
            assert_eq!(c.size, (400, 300));
            assert_eq!(c.scale_fraction, 1.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = Box3> {
            (prop::array::uniform3(0usize..20), prop::array::uniform3(1usize..12)).prop_map(|(o, s)| Box3::new(o, s))
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_matches_voxel_count(a in arb_box(), c in arb_box()) {
                prop_assert_eq!(iou(&a, &c), iou(&c, &a));
                prop_assert_eq!(iou_ratio(&a, &c), voxel_iou(&a, &c));
                let v = iou(&a, &c);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v == 0.0, a.intersection_volume(&c) == 0);
            }

            #[test]
            fn bounding_box_contains_both(a in arb_box(), c in arb_box()) {
                let bb = min_bounding_box(&a, &c);
                prop_assert!(bb.contains(&a) && bb.contains(&c));
            }
        }
    }
}
