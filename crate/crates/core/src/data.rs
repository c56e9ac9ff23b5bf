//! Samples, CT preprocessing, split construction, the synthetic corpus and
//! the raw on-disk container (`<id>.json` sidecar + `<id>.bin` blob).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::seed::{self, Stream};
use crate::volume::Volume;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Xray2d,
    Ct3d,
    Mri3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub modality: Modality,
    pub payload: Volume,
    /// Payload holds raw Hounsfield units rather than `[0, 1]` intensities.
    pub hu_flag: bool,
    pub spacing: [f64; 3],
    /// Multi-label classification targets.
    pub labels: Option<Vec<bool>>,
    /// Binary masks, one channel per class, over the payload grid.
    pub mask: Option<Volume>,
    /// Generator parameters for synthetic samples.
    pub generation: Option<serde_json::Value>,
}

impl Sample {
    /// Intensities in `[0, 1]`: HU payloads are truncated to `window` and
    /// rescaled, others pass through. Applying it twice equals once.
    pub fn normalized(&self, window: (f32, f32)) -> Sample {
        let mut out = self.clone();
        if self.hu_flag {
            out.payload = truncate_hu(&self.payload, window.0, window.1);
            out.hu_flag = false;
        }
        out
    }

    pub fn mask_bool(&self) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| m.data.iter().map(|&v| v >= 0.5).collect())
    }
}

/// Clamp to `[lo, hi]` then rescale to `[0, 1]`.
pub fn truncate_hu(v: &Volume, lo: f32, hi: f32) -> Volume {
    let mut out = v.clone();
    for x in &mut out.data {
        *x = hu_to_unit(*x, lo, hi);
    }
    out
}

pub fn hu_to_unit(x: f32, lo: f32, hi: f32) -> f32 {
    (x.clamp(lo, hi) - lo) / (hi - lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pretrain_hu_window: (f32, f32),
    pub finetune_hu_window: (f32, f32),
    pub background_hu: f32,
    pub background_fraction: f64,
    /// Veto 3D pre-training global crops that are mostly air.
    pub reject_background: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_hu_window: (-1000.0, 1000.0),
            finetune_hu_window: (-200.0, 200.0),
            background_hu: -150.0,
            background_fraction: 0.85,
            reject_background: true,
        }
    }
}

/// Fraction of voxels (channel 0) strictly below `threshold`.
pub fn background_fraction(crop: &Volume, threshold: f32) -> f64 {
    let ch = crop.channel(0);
    let bg = ch.iter().filter(|&&v| v < threshold).count();
    bg as f64 / ch.len() as f64
}

/// True iff strictly more than `fraction` of the crop is background.
/// `threshold` is in the crop's own units (HU, or its normalised value).
pub fn is_rejected_background(crop: &Volume, threshold: f32, fraction: f64) -> bool {
    background_fraction(crop, threshold) > fraction
}

/// Acceptance predicate for sub-crop boxes over a normalised CT volume.
pub fn background_filter<'a>(volume: &'a Volume, cfg: &DataConfig) -> impl Fn(&Box3) -> bool + 'a {
    let (lo, hi) = cfg.pretrain_hu_window;
    let threshold = hu_to_unit(cfg.background_hu, lo, hi);
    let fraction = cfg.background_fraction;
    move |b: &Box3| match volume.crop(b.origin, b.size) {
        Ok(c) => !is_rejected_background(&c, threshold, fraction),
        Err(_) => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub pretrain_ids: Vec<String>,
    pub finetune_ids: Vec<String>,
    pub labeling_ratio: f64,
    pub seed: u64,
}

/// 70/10/20 train/val/test partition of a seeded permutation; the first
/// `floor(r * |train|)` training ids are labelled for fine-tuning, the
/// rest form the pre-training set.
pub fn make_splits(ids: &[String], labeling_ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(labeling_ratio > 0.0 && labeling_ratio <= 1.0) {
        return Err(Error::Config(format!("labeling ratio {labeling_ratio} outside (0, 1]")));
    }
    let mut perm: Vec<String> = ids.to_vec();
    perm.sort();
    perm.shuffle(&mut seed::rng(seed, Stream::Split, &[]));
    let n = perm.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let train_ids = perm[..n_train].to_vec();
    let val_ids = perm[n_train..n_train + n_val].to_vec();
    let test_ids = perm[n_train + n_val..].to_vec();
    let n_fine = ((labeling_ratio * n_train as f64) + 1e-9).floor() as usize;
    let n_fine = n_fine.min(n_train);
    Ok(SplitPlan {
        finetune_ids: train_ids[..n_fine].to_vec(),
        pretrain_ids: train_ids[n_fine..].to_vec(),
        train_ids,
        val_ids,
        test_ids,
        labeling_ratio,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "xray2d")]
    Xray2d,
    #[serde(rename = "ct3d-seg")]
    Ct3dSeg,
    #[serde(rename = "mri3d-seg")]
    Mri3dSeg,
    #[serde(rename = "ct3d-cls")]
    Ct3dCls,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(json!(s)).map_err(|_| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size_2d: usize,
    pub dims_3d: [usize; 3],
    pub num_classes: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size_2d: 64, dims_3d: [48, 48, 32], num_classes: 3, noise: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Binary mask of the ellipsoid over `dims`.
    pub fn mask(&self, dims: [usize; 3]) -> Volume {
        let mut m = Volume::zeros(1, dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    if self.contains([i, j, k]) {
                        let o = m.index(0, i, j, k);
                        m.data[o] = 1.0;
                    }
                }
            }
        }
        m
    }

    fn random(dims: [usize; 3], radius_frac: (f64, f64), within: Option<&Ellipsoid>, rng: &mut impl Rng) -> Ellipsoid {
        let radii = dims.map(|d| (d as f64 * rng.random_range(radius_frac.0..radius_frac.1)).max(1.5));
        let center = match within {
            // keep the inner centre well inside the outer one
            Some(o) => [0, 1, 2].map(|a| o.center[a] + rng.random_range(-0.3..0.3) * o.radii[a]),
            None => [0, 1, 2].map(|a| {
                let d = dims[a] as f64;
                d / 2.0 + rng.random_range(-0.1..0.1) * d
            }),
        };
        Ellipsoid { center, radii }
    }
}

/// Procedural corpus: 2D radiographs with class-coded Gaussian blobs,
/// or 3D volumes with ellipsoid organs and lesions and exact masks.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64, cfg: &SynthConfig) -> Vec<Sample> {
    (0..n).map(|i| synth_sample(kind, i, seed, cfg)).collect()
}

fn synth_sample(kind: SynthKind, index: usize, seed: u64, cfg: &SynthConfig) -> Sample {
    let mut rng = seed::rng(seed, Stream::Synth, &[index as u64]);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let id = format!("{}-{index:05}", kind_tag(kind));
    match kind {
        SynthKind::Xray2d => {
            let s = cfg.size_2d;
            let mut img = Volume::image(1, s, s);
            let tilt: f64 = rng.random_range(-0.1..0.1);
            let mut labels = vec![false; cfg.num_classes];
            let mut blobs = Vec::new();
            for (c, label) in labels.iter_mut().enumerate() {
                if rng.random::<f64>() < 0.5 {
                    *label = true;
                    let sigma = s as f64 * (0.04 + 0.03 * c as f64);
                    let cy = rng.random_range(0.2..0.8) * s as f64;
                    let cx = rng.random_range(0.2..0.8) * s as f64;
                    blobs.push(json!({"class": c, "center": [cy, cx], "sigma": sigma, "amplitude": 0.45}));
                }
            }
            for y in 0..s {
                for x in 0..s {
                    let mut v = 0.3 + tilt * (y as f64 / s as f64 - 0.5) + cfg.noise * unit.sample(&mut rng);
                    for b in &blobs {
                        let (cy, cx) = (b["center"][0].as_f64().unwrap(), b["center"][1].as_f64().unwrap());
                        let sg = b["sigma"].as_f64().unwrap();
                        let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        v += 0.45 * (-r2 / (2.0 * sg * sg)).exp();
                    }
                    let o = img.index(0, 0, y, x);
                    img.data[o] = v.clamp(0.0, 1.0) as f32;
                }
            }
            Sample {
                id,
                modality: Modality::Xray2d,
                payload: img,
                hu_flag: false,
                spacing: [1.0; 3],
                labels: Some(labels),
                mask: None,
                generation: Some(json!({"kind": "xray2d", "tilt": tilt, "blobs": blobs})),
            }
        }
        SynthKind::Ct3dSeg | SynthKind::Mri3dSeg | SynthKind::Ct3dCls => {
            let dims = cfg.dims_3d;
            let ct = kind != SynthKind::Mri3dSeg;
            let body = Ellipsoid::random(dims, (0.38, 0.46), None, &mut rng);
            let organ = Ellipsoid::random(dims, (0.18, 0.26), Some(&body), &mut rng);
            let lesion = Ellipsoid::random(dims, (0.1, 0.16), Some(&organ), &mut rng);
            // (air, body, organ, lesion) in HU for CT, unit intensities for MRI
            let levels: [f64; 4] = if ct { [-1000.0, 40.0, 100.0, 170.0] } else { [0.0, 0.35, 0.55, 0.85] };
            let amp = if ct { 1000.0 * cfg.noise } else { cfg.noise };
            let cls_lesion = kind == SynthKind::Ct3dCls && rng.random::<f64>() < 0.5;
            let mut v = Volume::zeros(1, dims);
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    for k in 0..dims[2] {
                        let p = [i, j, k];
                        let mut x = if !body.contains(p) {
                            levels[0]
                        } else if kind != SynthKind::Ct3dCls && lesion.contains(p) {
                            levels[3]
                        } else if cls_lesion && lesion.contains(p) {
                            levels[3]
                        } else if organ.contains(p) {
                            levels[2]
                        } else {
                            levels[1]
                        };
                        x += amp * unit.sample(&mut rng);
                        if !ct {
                            x = x.clamp(0.0, 1.0);
                        }
                        let o = v.index(0, i, j, k);
                        v.data[o] = x as f32;
                    }
                }
            }
            let (mask, labels) = match kind {
                SynthKind::Ct3dCls => (None, Some(vec![cls_lesion])),
                _ => (Some(lesion.mask(dims)), None),
            };
            Sample {
                id,
                modality: if ct { Modality::Ct3d } else { Modality::Mri3d },
                payload: v,
                hu_flag: ct,
                spacing: [1.0; 3],
                labels,
                mask,
                generation: Some(json!({
                    "kind": kind_tag(kind),
                    "body": body,
                    "organ": organ,
                    "lesion": lesion,
                    "levels": levels,
                    "lesion_present": kind != SynthKind::Ct3dCls || cls_lesion,
                })),
            }
        }
    }
}

fn kind_tag(kind: SynthKind) -> &'static str {
    match kind {
        SynthKind::Xray2d => "xray2d",
        SynthKind::Ct3dSeg => "ct3d-seg",
        SynthKind::Mri3dSeg => "mri3d-seg",
        SynthKind::Ct3dCls => "ct3d-cls",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    format_version: u32,
    id: String,
    modality: Modality,
    /// `[channels, d0, d1, d2]`.
    shape: [usize; 4],
    dtype: String,
    spacing: [f64; 3],
    hu_flag: bool,
    labels: Option<Vec<bool>>,
    mask_channels: usize,
    generation: Option<serde_json::Value>,
}

const DTYPE: &str = "float32-le";

fn paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.json")), dir.join(format!("{id}.bin")))
}

pub fn save_raw(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = &sample.payload;
    let header = RawHeader {
        format_version: FORMAT_VERSION,
        id: sample.id.clone(),
        modality: sample.modality,
        shape: [p.channels, p.dims[0], p.dims[1], p.dims[2]],
        dtype: DTYPE.into(),
        spacing: sample.spacing,
        hu_flag: sample.hu_flag,
        labels: sample.labels.clone(),
        mask_channels: sample.mask.as_ref().map_or(0, |m| m.channels),
        generation: sample.generation.clone(),
    };
    let (json_path, bin_path) = paths(dir, &sample.id);
    fs::write(json_path, serde_json::to_vec_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(4 * (p.data.len() + sample.mask.as_ref().map_or(0, |m| m.data.len())));
    for v in p.data.iter().chain(sample.mask.iter().flat_map(|m| m.data.iter())) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path, bytes)?;
    Ok(())
}

/// Loads sample `id` from `dir`.
pub fn load_raw(dir: &Path, id: &str) -> Result<Sample> {
    let (json_path, bin_path) = paths(dir, id);
    let header: RawHeader = serde_json::from_slice(&fs::read(&json_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: format version {} (expected {FORMAT_VERSION})", json_path.display(), header.format_version)));
    }
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("{}: dtype {:?}", json_path.display(), header.dtype)));
    }
    if header.id != id {
        return Err(Error::Format(format!("{}: id {:?} does not match file name", json_path.display(), header.id)));
    }
    let [c, d0, d1, d2] = header.shape;
    let voxels = d0 * d1 * d2;
    let expected = 4 * voxels * (c + header.mask_channels);
    let bytes = fs::read(&bin_path)?;
    if bytes.len() != expected || voxels == 0 || c == 0 {
        return Err(Error::Format(format!("{}: {} bytes, manifest implies {expected}", bin_path.display(), bytes.len())));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let (pay, rest) = floats.split_at(c * voxels);
    let payload = Volume::from_vec(c, [d0, d1, d2], pay.to_vec())?;
    let mask = if header.mask_channels > 0 {
        Some(Volume::from_vec(header.mask_channels, [d0, d1, d2], rest.to_vec())?)
    } else {
        None
    };
    Ok(Sample {
        id: header.id,
        modality: header.modality,
        payload,
        hu_flag: header.hu_flag,
        spacing: header.spacing,
        labels: header.labels,
        mask,
        generation: header.generation,
    })
}

/// Sample ids present in `dir` (every `<id>.bin`), sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Every sample in `dir`, in id order.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    list_ids(dir)?.iter().map(|id| load_raw(dir, id)).collect()
}

/// Samples of `dir` whose ids appear in `ids`, in the order given.
pub fn load_subset(dir: &Path, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter().map(|id| load_raw(dir, id)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: SynthKind,
    pub n: usize,
    pub seed: u64,
    pub config: SynthConfig,
    pub ids: Vec<String>,
}

/// Writes a synthetic dataset plus `manifest.json` into `dir`.
pub fn write_synth(dir: &Path, kind: SynthKind, n: usize, seed: u64, cfg: &SynthConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let samples = synth_dataset(kind, n, seed, cfg);
    for s in &samples {
        save_raw(s, dir)?;
    }
    let manifest = DatasetManifest { kind, n, seed, config: cfg.clone(), ids: samples.iter().map(|s| s.id.clone()).collect() };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
