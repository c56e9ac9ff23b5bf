//! Two-stage cascaded augmentation.
//!
//! The global stage (geometric, intensity preserving) produces the
//! restoration targets `x1`, `x2`; the local stage corrupts copies of them
//! into the network inputs `x1c`, `x2c`. Every stochastic choice is first
//! drawn into a [`Transform`] record and then applied by [`replay`], so the
//! recorded [`AugmentParams`] reproduce an output bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{self, Box3, CropSpec2D, MultiCropConfig, SubCropConfig, SubCropResult};
use crate::seed;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    /// Mirror along a spatial axis (`2` is horizontal for images).
    Flip { axis: usize },
    /// In-plane rotation of an image about its centre.
    Rotate2d { degrees: f64 },
    /// Rotation (degrees about d0, d1, d2) and isotropic scaling about the
    /// volume centre, trilinear, padded with the channel minimum.
    Affine3d { degrees: [f64; 3], scale: f64 },
    Grayscale,
    GaussianBlur { sigma: f64 },
    /// Zero-filled box `[x, x + w) x [y, y + h)` in image coordinates.
    Cutout { x: usize, y: usize, w: usize, h: usize },
    /// Additive Gaussian noise drawn from a stream seeded with `seed`.
    Noise { std: f64, seed: u64 },
    Gamma { gamma: f64 },
    /// Exchange two equal-size, non-overlapping blocks.
    Swap { a: [usize; 3], b: [usize; 3], size: [usize; 3] },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub seed: u64,
    pub transforms: Vec<Transform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub rotate_p: f64,
    pub max_rotation_deg: f64,
    pub affine_p: f64,
    pub affine_scale: (f64, f64),
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_p: f64,
    pub cutout_max_area: f64,
    pub noise_p: f64,
    pub noise_std_max: f64,
    pub gamma_p: f64,
    pub gamma_range: (f64, f64),
    pub swap_p: f64,
    pub swap_patch_fraction: f64,
    pub swap_iterations: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            rotate_p: 0.5,
            max_rotation_deg: 10.0,
            affine_p: 0.5,
            affine_scale: (0.9, 1.1),
            grayscale_p: 0.5,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            cutout_p: 0.5,
            cutout_max_area: 0.25,
            noise_p: 0.5,
            noise_std_max: 0.1,
            gamma_p: 0.5,
            gamma_range: (0.7, 1.5),
            swap_p: 0.5,
            swap_patch_fraction: 0.25,
            swap_iterations: 4,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            flip_p: 0.0,
            rotate_p: 0.0,
            affine_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            cutout_p: 0.0,
            noise_p: 0.0,
            gamma_p: 0.0,
            swap_p: 0.0,
            ..Self::default()
        }
    }

    /// Global stage on, local (corrupting) stage off.
    pub fn without_local(&self) -> Self {
        Self {
            grayscale_p: 0.0,
            blur_p: 0.0,
            cutout_p: 0.0,
            noise_p: 0.0,
            gamma_p: 0.0,
            swap_p: 0.0,
            ..self.clone()
        }
    }
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn sample_global_2d(cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<Transform> {
    let mut t = Vec::new();
    if coin(rng, cfg.flip_p) {
        t.push(Transform::Flip { axis: 2 });
    }
    if coin(rng, cfg.rotate_p) {
        t.push(Transform::Rotate2d { degrees: uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg) });
    }
    t
}

fn sample_local_2d(cfg: &AugmentConfig, dims: [usize; 3], rng: &mut impl Rng) -> Vec<Transform> {
    let mut t = Vec::new();
    if coin(rng, cfg.grayscale_p) {
        t.push(Transform::Grayscale);
    }
    if coin(rng, cfg.blur_p) {
        t.push(Transform::GaussianBlur { sigma: uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1) });
    }
    if coin(rng, cfg.cutout_p) {
        let (h, w) = (dims[1], dims[2]);
        let area = (h * w) as f64;
        let frac = uniform(rng, 0.02f64.min(cfg.cutout_max_area), cfg.cutout_max_area);
        let aspect = uniform(rng, 0.5, 2.0);
        let mut cw = ((frac * area * aspect).sqrt().round() as usize).clamp(1, w);
        let mut ch = ((frac * area / aspect).sqrt().round() as usize).clamp(1, h);
        while (cw * ch) as f64 > cfg.cutout_max_area * area && (cw > 1 || ch > 1) {
            if cw >= ch {
                cw -= 1;
            } else {
                ch -= 1;
            }
        }
        let x = rng.random_range(0..=w - cw);
        let y = rng.random_range(0..=h - ch);
        t.push(Transform::Cutout { x, y, w: cw, h: ch });
    }
    t
}

fn sample_global_3d(cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<Transform> {
    let mut t = Vec::new();
    for axis in 0..3 {
        if coin(rng, cfg.flip_p) {
            t.push(Transform::Flip { axis });
        }
    }
    if coin(rng, cfg.affine_p) {
        let r = cfg.max_rotation_deg;
        let degrees = [uniform(rng, -r, r), uniform(rng, -r, r), uniform(rng, -r, r)];
        t.push(Transform::Affine3d { degrees, scale: uniform(rng, cfg.affine_scale.0, cfg.affine_scale.1) });
    }
    t
}

fn sample_local_3d(cfg: &AugmentConfig, dims: [usize; 3], rng: &mut impl Rng) -> Vec<Transform> {
    let mut t = Vec::new();
    if coin(rng, cfg.blur_p) {
        t.push(Transform::GaussianBlur { sigma: uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1) });
    }
    if coin(rng, cfg.noise_p) {
        t.push(Transform::Noise { std: uniform(rng, 0.0, cfg.noise_std_max), seed: rng.random() });
    }
    if coin(rng, cfg.gamma_p) {
        let (lo, hi) = (cfg.gamma_range.0.ln(), cfg.gamma_range.1.ln());
        t.push(Transform::Gamma { gamma: uniform(rng, lo, hi).exp() });
    }
    if coin(rng, cfg.swap_p) {
        let size = dims.map(|d| ((d as f64 * cfg.swap_patch_fraction).round() as usize).clamp(1, d));
        for _ in 0..cfg.swap_iterations {
            // up to a few tries to find a disjoint pair
            for _ in 0..8 {
                let a = [0, 1, 2].map(|k| rng.random_range(0..=dims[k] - size[k]));
                let b = [0, 1, 2].map(|k| rng.random_range(0..=dims[k] - size[k]));
                if Box3::new(a, size).intersection_volume(&Box3::new(b, size)) == 0 {
                    t.push(Transform::Swap { a, b, size });
                    break;
                }
            }
        }
    }
    t
}

/// Applies recorded transforms in order, then clamps to `[0, 1]`.
pub fn replay(input: &Volume, transforms: &[Transform]) -> Volume {
    let mut v = input.clone();
    for t in transforms {
        v = apply_one(&v, t);
    }
    v.clamp01();
    v
}

fn apply_one(v: &Volume, t: &Transform) -> Volume {
    match *t {
        Transform::Flip { axis } => v.flip(axis),
        Transform::Rotate2d { degrees } => rotate_2d(v, degrees),
        Transform::Affine3d { degrees, scale } => affine_3d(v, degrees, scale),
        Transform::Grayscale => grayscale(v),
        Transform::GaussianBlur { sigma } => gaussian_blur(v, sigma),
        Transform::Cutout { x, y, w, h } => {
            let mut out = v.clone();
            for c in 0..v.channels {
                for i in 0..v.dims[0] {
                    for row in y..y + h {
                        let off = out.index(c, i, row, x);
                        out.data[off..off + w].iter_mut().for_each(|p| *p = 0.0);
                    }
                }
            }
            out
        }
        Transform::Noise { std, seed } => {
            let mut out = v.clone();
            if std > 0.0 {
                let mut rng = seed::rng(seed, seed::Stream::Misc, &[]);
                let n = Normal::new(0.0, std).expect("finite std");
                for p in &mut out.data {
                    *p += n.sample(&mut rng) as f32;
                }
            }
            out
        }
        Transform::Gamma { gamma } => {
            let mut out = v.clone();
            for p in &mut out.data {
                *p = p.max(0.0).powf(gamma as f32);
            }
            out
        }
        Transform::Swap { a, b, size } => swap_blocks(v, a, b, size),
    }
}

fn swap_blocks(v: &Volume, a: [usize; 3], b: [usize; 3], size: [usize; 3]) -> Volume {
    let mut out = v.clone();
    if a == b {
        return out;
    }
    for c in 0..v.channels {
        for i in 0..size[0] {
            for j in 0..size[1] {
                let ra = v.index(c, a[0] + i, a[1] + j, a[2]);
                let rb = v.index(c, b[0] + i, b[1] + j, b[2]);
                out.data[ra..ra + size[2]].copy_from_slice(&v.data[rb..rb + size[2]]);
                out.data[rb..rb + size[2]].copy_from_slice(&v.data[ra..ra + size[2]]);
            }
        }
    }
    out
}

fn grayscale(v: &Volume) -> Volume {
    if v.channels != 3 {
        return v.clone();
    }
    let mut out = v.clone();
    let n = v.voxels();
    for p in 0..n {
        let y = 0.299 * v.data[p] + 0.587 * v.data[n + p] + 0.114 * v.data[2 * n + p];
        for c in 0..3 {
            out.data[c * n + p] = y;
        }
    }
    out
}

/// Normalised 1D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with edge replication over the image axes
/// (d1, d2) and, for volumes, d0 as well.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut cur = v.clone();
    let axes: &[usize] = if v.is_2d() { &[1, 2] } else { &[0, 1, 2] };
    for &axis in axes {
        let mut next = cur.clone();
        let [d0, d1, d2] = cur.dims;
        let len = cur.dims[axis] as isize;
        for c in 0..cur.channels {
            for i in 0..d0 {
                for j in 0..d1 {
                    for l in 0..d2 {
                        let pos = [i, j, l][axis] as isize;
                        let mut acc = 0.0f64;
                        for (t, w) in k.iter().enumerate() {
                            let q = (pos + t as isize - r).clamp(0, len - 1) as usize;
                            let mut idx = [i, j, l];
                            idx[axis] = q;
                            acc += w * cur.at(c, idx[0], idx[1], idx[2]) as f64;
                        }
                        let o = next.index(c, i, j, l);
                        next.data[o] = acc as f32;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

fn sample_linear(v: &Volume, c: usize, p: [f64; 3], fill: f32) -> f32 {
    let mut acc = 0.0f64;
    let base = p.map(|x| x.floor());
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let q = base[a] as isize + bit as isize;
            let frac = p[a] - base[a];
            w *= if bit == 1 { frac } else { 1.0 - frac };
            if w == 0.0 {
                break;
            }
            if q < 0 || q >= v.dims[a] as isize {
                idx[a] = usize::MAX;
            } else {
                idx[a] = q as usize;
            }
        }
        if w == 0.0 {
            continue;
        }
        let val = if idx.contains(&usize::MAX) { fill } else { v.at(c, idx[0], idx[1], idx[2]) };
        acc += w * val as f64;
    }
    acc as f32
}

fn rotate_2d(v: &Volume, degrees: f64) -> Volume {
    let (s, c) = degrees.to_radians().sin_cos();
    let (h, w) = (v.dims[1], v.dims[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Volume::zeros(v.channels, v.dims);
    for ch in 0..v.channels {
        for y in 0..h {
            for x in 0..w {
                // inverse rotation of the output pixel
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let o = out.index(ch, 0, y, x);
                out.data[o] = sample_linear(v, ch, [0.0, sy, sx], 0.0);
            }
        }
    }
    out
}

fn rotation_matrix(degrees: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, g] = degrees.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(rz, mul(ry, rx))
}

fn affine_3d(v: &Volume, degrees: [f64; 3], scale: f64) -> Volume {
    let r = rotation_matrix(degrees);
    let centre = v.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut out = Volume::zeros(v.channels, v.dims);
    for ch in 0..v.channels {
        let fill = v.channel(ch).iter().copied().fold(f32::INFINITY, f32::min);
        for i in 0..v.dims[0] {
            for j in 0..v.dims[1] {
                for l in 0..v.dims[2] {
                    let d = [i as f64 - centre[0], j as f64 - centre[1], l as f64 - centre[2]];
                    // source = R^T d / scale + centre
                    let src = [0, 1, 2].map(|a| (0..3).map(|k| r[k][a] * d[k]).sum::<f64>() / scale + centre[a]);
                    let o = out.index(ch, i, j, l);
                    out.data[o] = sample_linear(v, ch, src, fill);
                }
            }
        }
    }
    out
}

fn run(input: &Volume, transforms: Vec<Transform>, seed: u64) -> (Volume, AugmentParams) {
    let out = replay(input, &transforms);
    (out, AugmentParams { seed, transforms })
}

/// Flip and rotation of a 2D view (the crop itself comes from multi-crop).
pub fn apply_global_2d(image: &Volume, cfg: &AugmentConfig, seed: u64) -> (Volume, AugmentParams) {
    let mut rng = seed::rng(seed, seed::Stream::Views, &[0]);
    run(image, sample_global_2d(cfg, &mut rng), seed)
}

/// Grayscale, Gaussian blur, cutout.
pub fn apply_local_2d(image: &Volume, cfg: &AugmentConfig, seed: u64) -> (Volume, AugmentParams) {
    let mut rng = seed::rng(seed, seed::Stream::Views, &[1]);
    run(image, sample_local_2d(cfg, image.dims, &mut rng), seed)
}

/// Per-axis flips and a small affine.
pub fn apply_global_3d(volume: &Volume, cfg: &AugmentConfig, seed: u64) -> (Volume, AugmentParams) {
    let mut rng = seed::rng(seed, seed::Stream::Views, &[2]);
    run(volume, sample_global_3d(cfg, &mut rng), seed)
}

/// Gaussian blur, noise, gamma, block swap.
pub fn apply_local_3d(volume: &Volume, cfg: &AugmentConfig, seed: u64) -> (Volume, AugmentParams) {
    let mut rng = seed::rng(seed, seed::Stream::Views, &[3]);
    run(volume, sample_local_3d(cfg, volume.dims, &mut rng), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub augment: AugmentConfig,
    pub subcrop: SubCropConfig,
    pub multicrop: MultiCropConfig,
    pub global_size_3d: [usize; 3],
    pub local_size_3d: [usize; 3],
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            subcrop: SubCropConfig::default(),
            multicrop: MultiCropConfig::default(),
            global_size_3d: [64, 64, 32],
            local_size_3d: [16, 16, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropRecord {
    SubCrop(SubCropResult),
    MultiCrop { globals: Vec<CropSpec2D>, locals: Vec<CropSpec2D> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub crops: CropRecord,
    pub global: [AugmentParams; 2],
    pub corrupt: [AugmentParams; 2],
    pub locals: Vec<AugmentParams>,
}

/// One sample's siamese global views (targets and corrupted inputs) and its
/// corrupted local views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub x1: Volume,
    pub x2: Volume,
    pub x1c: Volume,
    pub x2c: Volume,
    pub locals: Vec<Volume>,
    pub meta: ViewMeta,
}

fn crop_2d(img: &Volume, c: &CropSpec2D) -> Result<Volume> {
    let crop = img.crop([0, c.origin.1, c.origin.0], [1, c.size.1, c.size.0])?;
    Ok(crop.resize([1, c.output_size, c.output_size]))
}

/// Builds a [`ViewSet`] from one sample. 3D samples use sub-crop (with
/// `accept` vetoing global boxes, e.g. background rejection); 2D samples
/// use multi-crop. All randomness derives from `seed`.
pub fn make_view_set(sample: &Volume, cfg: &ViewConfig, seed: u64, accept: &dyn Fn(&Box3) -> bool) -> Result<ViewSet> {
    let aug = &cfg.augment;
    let sub = |k: u64| seed::derive(seed, seed::Stream::Views, &[k]);
    if sample.is_2d() {
        let mut rng = seed::rng(seed, seed::Stream::Views, &[100]);
        let (globals, locals) = geometry::multicrop_2d((sample.dims[1], sample.dims[2]), &cfg.multicrop, &mut rng);
        if globals.len() != 2 {
            return Err(crate::Error::Config("multi-crop must produce exactly two global views".into()));
        }
        let g1 = crop_2d(sample, &globals[0])?;
        let g2 = crop_2d(sample, &globals[1])?;
        let (x1, p1) = apply_global_2d(&g1, aug, sub(1));
        let (x2, p2) = apply_global_2d(&g2, aug, sub(2));
        let (x1c, c1) = apply_local_2d(&x1, aug, sub(3));
        let (x2c, c2) = apply_local_2d(&x2, aug, sub(4));
        let mut lv = Vec::new();
        let mut lp = Vec::new();
        for (k, spec) in locals.iter().enumerate() {
            let crop = crop_2d(sample, spec)?;
            let (v, p) = apply_local_2d(&crop, aug, sub(10 + k as u64));
            lv.push(v);
            lp.push(p);
        }
        return Ok(ViewSet {
            x1,
            x2,
            x1c,
            x2c,
            locals: lv,
            meta: ViewMeta { crops: CropRecord::MultiCrop { globals, locals }, global: [p1, p2], corrupt: [c1, c2], locals: lp },
        });
    }
    let mut rng = seed::rng(seed, seed::Stream::Views, &[100]);
    let crops = geometry::sub_crop(sample.dims, &cfg.subcrop, &mut rng, accept)?;
    let global = |bx: &Box3, k: u64| -> Result<(Volume, AugmentParams)> {
        let crop = sample.crop(bx.origin, bx.size)?;
        let (g, p) = apply_global_3d(&crop, aug, sub(k));
        Ok((g.resize(cfg.global_size_3d), p))
    };
    let (x1, p1) = global(&crops.global_a, 1)?;
    let (x2, p2) = global(&crops.global_b, 2)?;
    let (x1c, c1) = apply_local_3d(&x1, aug, sub(3));
    let (x2c, c2) = apply_local_3d(&x2, aug, sub(4));
    let mut lv = Vec::new();
    let mut lp = Vec::new();
    for (k, bx) in crops.locals.iter().enumerate() {
        let crop = sample.crop(bx.origin, bx.size)?.resize(cfg.local_size_3d);
        let (v, p) = apply_local_3d(&crop, aug, sub(10 + k as u64));
        lv.push(v);
        lp.push(p);
    }
    Ok(ViewSet {
        x1,
        x2,
        x1c,
        x2c,
        locals: lv,
        meta: ViewMeta { crops: CropRecord::SubCrop(crops), global: [p1, p2], corrupt: [c1, c2], locals: lp },
    })
}
