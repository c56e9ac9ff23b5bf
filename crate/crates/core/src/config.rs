//! Run configuration: one JSON document whose sections default
//! independently, with dotted-path overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{AugmentConfig, ViewConfig};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::geometry::{MultiCropConfig, SubCropConfig};
use crate::heads::PredictorKind;
use crate::layers::Dimensionality;
use crate::nsunet::ModelConfig;
use crate::objective::ObjectiveConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub predictor: PredictorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub subcrop: SubCropConfig,
    pub multicrop: MultiCropConfig,
    pub global_size_3d: [usize; 3],
    pub local_size_3d: [usize; 3],
}

impl Default for CropConfig {
    fn default() -> Self {
        let v = ViewConfig::default();
        Self { subcrop: v.subcrop, multicrop: v.multicrop, global_size_3d: v.global_size_3d, local_size_3d: v.local_size_3d }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Also checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// View-generation threads; 0 builds views on the training thread.
    pub num_workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 4, lr: 1e-2, momentum: 0.9, weight_decay: 1e-5, checkpoint_every: 10, num_workers: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Keep the transferred encoder fixed (parameters and BN statistics).
    pub freeze_encoder: bool,
    pub input_size_2d: usize,
    /// Resize target for 3D inputs; `None` keeps the native grid.
    pub input_size_3d: Option<[usize; 3]>,
    pub dice_eps: f64,
    /// Decoder of the segmentation network uses skip connections.
    pub seg_skip_connections: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            freeze_encoder: false,
            input_size_2d: 224,
            input_size_3d: None,
            dice_eps: 1e-5,
            seg_skip_connections: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub heads: HeadsConfig,
    pub augment: AugmentConfig,
    pub crop: CropConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            heads: HeadsConfig::default(),
            augment: AugmentConfig::default(),
            crop: CropConfig::default(),
            objective: ObjectiveConfig::default(),
            data: DataConfig::default(),
            trainer: TrainerConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-scale 3D pre-training schedule (240 epochs, batch 32).
    pub fn full_3d() -> Self {
        let mut c = Self::default();
        c.trainer.epochs = 240;
        c.trainer.batch_size = 32;
        c
    }

    /// Full-scale 2D pre-training schedule (240 epochs, batch 256,
    /// ResNet-18 encoder, 224 views).
    pub fn full_2d() -> Self {
        let mut c = Self::full_3d();
        c.model.dimensionality = Dimensionality::D2;
        c.trainer.batch_size = 256;
        c
    }

    /// Small enough to pre-train on synthetic data in minutes on one core.
    pub fn desk_3d() -> Self {
        let mut c = Self::default();
        c.model.decoder_channels = 8;
        c.model.encoder_width_multiplier = 0.25;
        c.crop.subcrop.global_sizes = vec![[24, 24, 16], [32, 32, 16], [32, 32, 24]];
        c.crop.subcrop.local_sizes = vec![[8, 8, 8], [12, 12, 8], [16, 16, 8]];
        c.crop.global_size_3d = [32, 32, 16];
        c.crop.local_size_3d = [8, 8, 8];
        c.finetune.input_size_3d = Some([32, 32, 16]);
        c
    }

    pub fn desk_2d() -> Self {
        let mut c = Self::desk_3d();
        c.model.dimensionality = Dimensionality::D2;
        c.model.blocks_per_stage = 1;
        c.crop.multicrop.output_size = 64;
        c.crop.multicrop.local_output_size = 32;
        c.finetune.input_size_2d = 64;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "full-3d" => Ok(Self::full_3d()),
            "full-2d" => Ok(Self::full_2d()),
            "desk-3d" => Ok(Self::desk_3d()),
            "desk-2d" => Ok(Self::desk_2d()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            augment: self.augment.clone(),
            subcrop: self.crop.subcrop.clone(),
            multicrop: self.crop.multicrop.clone(),
            global_size_3d: self.crop.global_size_3d,
            local_size_3d: self.crop.local_size_3d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.trainer;
        if t.batch_size < 2 {
            return Err(Error::Config("trainer.batch_size must be >= 2 (batch statistics)".into()));
        }
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("trainer lr/momentum/weight_decay out of range".into()));
        }
        if self.finetune.batch_size < 2 {
            return Err(Error::Config("finetune.batch_size must be >= 2 (batch statistics)".into()));
        }
        let s = &self.crop.subcrop;
        if s.global_sizes.is_empty() || s.local_sizes.is_empty() {
            return Err(Error::Config("crop size sets must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&s.iou_min) {
            return Err(Error::Config("crop.subcrop.iou_min outside [0, 1]".into()));
        }
        if self.crop.multicrop.num_global != 2 {
            return Err(Error::Config("crop.multicrop.num_global must be 2".into()));
        }
        Ok(())
    }

    /// Parses a configuration document over `base` and applies `key=value`
    /// overrides (values parsed as JSON, else taken as strings). Unknown
    /// keys anywhere are rejected.
    pub fn resolve(base: &RunConfig, document: Option<&Value>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(base)?;
        if let Some(doc) = document {
            if !doc.is_object() {
                return Err(Error::Config("config document must be a JSON object".into()));
            }
            merge(&mut tree, doc);
        }
        for (path, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut tree, path, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(base, Some(&doc), overrides)
    }

    /// Writes `<dir>/config.resolved.json`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("{path}: {part} is not a section")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {path}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("empty config key".into()))
}
