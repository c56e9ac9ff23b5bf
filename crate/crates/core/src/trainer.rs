//! Optimisation: cosine-annealed SGD, the pre-training loop with
//! checkpoint/resume, and classification / segmentation fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::{make_view_set, ViewConfig, ViewMeta, ViewSet};
use crate::autograd::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{background_filter, Modality, Sample};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Box3;
use crate::heads::Heads;
use crate::layers::{Conv, Dimensionality, Linear};
use crate::metrics::{dice, multilabel_auroc};
use crate::nsunet::NsUnet;
use crate::objective::{sample_scale, total_loss, LossBreakdown, ViewBatch};
use crate::params::ParamStore;
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tensor};
use crate::volume::Volume;

/// `lr0 * (1 + cos(pi * step / total)) / 2`, floored at 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buffers: BTreeMap::new() }
    }

    /// `d = g + wd * p; buf = mu * buf + d; p -= lr * buf`. Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (key, grad) in grads {
            let Some(p) = store.get_mut(key) else {
                return shape_err(format!("gradient for unknown parameter {key}"));
            };
            if p.shape() != grad.shape() {
                return shape_err(format!("gradient shape mismatch for {key}"));
            }
            let d: Vec<T> = grad.data().iter().zip(p.data()).map(|(&g, &w)| g + wd * w).collect();
            let buf = self.buffers.entry(key.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            for (b, dv) in buf.data_mut().iter_mut().zip(&d) {
                *b = mu * *b + *dv;
            }
            for (w, b) in p.data_mut().iter_mut().zip(buf.data()) {
                *w = *w - lr * *b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scale: usize,
    pub l_restore: f64,
    pub l_compare_global: f64,
    pub l_compare_local: f64,
    pub total: f64,
}

impl StepRecord {
    fn from_breakdown(step: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            scale: b.scale_used.0,
            l_restore: b.l_restore,
            l_compare_global: b.l_compare_global,
            l_compare_local: b.l_compare_local,
            total: b.total,
        }
    }

    pub const CSV_HEADER: &'static str = "step,scale,l_restore,l_compare_global,l_compare_local,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.scale, self.l_restore, self.l_compare_global, self.l_compare_local, self.total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_l_restore: f64,
    pub mean_l_compare_global: f64,
    pub mean_l_compare_local: f64,
    pub mean_total: f64,
}

impl EpochSummary {
    fn from_records(epoch: usize, rows: &[StepRecord]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            steps: rows.len(),
            mean_l_restore: mean(|r| r.l_restore),
            mean_l_compare_global: mean(|r| r.l_compare_global),
            mean_l_compare_local: mean(|r| r.l_compare_local),
            mean_total: mean(|r| r.total),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub final_metrics: Value,
    pub checkpoint_path: Option<PathBuf>,
}

/// A pre-training sample with intensities in `[0, 1]`.
#[derive(Clone, Debug)]
struct PretrainSample {
    volume: Volume,
    /// Derived from HU, so background rejection applies.
    ct: bool,
}

/// Pre-training state. Every random choice of step `s` derives from
/// `(seed, s)` or `(seed, epoch, sample)`, so `step` and `seed` are all a
/// resumed run needs besides parameters and momentum.
pub struct Pretrainer {
    pub cfg: RunConfig,
    pub model: NsUnet,
    pub heads: Heads,
    pub store: ParamStore<f32>,
    pub optim: Sgd<f32>,
    pub step: usize,
    samples: Vec<PretrainSample>,
    batch: usize,
    steps_per_epoch: usize,
    views: ViewConfig,
    /// Files under the output directory receiving per-sample crop boxes
    /// and augmentation parameters of every step.
    pub dump: DumpOptions,
    last_meta: Vec<(usize, ViewMeta)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DumpOptions {
    pub crops: bool,
    pub augment_params: bool,
}

impl Pretrainer {
    pub fn new(cfg: RunConfig, samples: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let (model, mut store) = NsUnet::build::<f32>(cfg.model.clone(), cfg.seed)?;
        let heads = Heads::new(cfg.model.dimensionality, cfg.model.decoder_channels, cfg.model.in_channels, cfg.heads.predictor);
        store.extend(heads.init_params(cfg.seed));
        let optim = Sgd::new(cfg.trainer.momentum, cfg.trainer.weight_decay);
        Self::assemble(cfg, model, heads, store, optim, 0, samples)
    }

    /// Continues from a pre-training checkpoint using its stored config.
    pub fn resume(ckpt: &Checkpoint, samples: &[Sample]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let model = NsUnet::new(cfg.model.clone())?;
        let heads = Heads::new(cfg.model.dimensionality, cfg.model.decoder_channels, cfg.model.in_channels, cfg.heads.predictor);
        let mut optim = Sgd::new(cfg.trainer.momentum, cfg.trainer.weight_decay);
        optim.buffers = ckpt.momentum.clone();
        Self::assemble(cfg, model, heads, ckpt.store.clone(), optim, ckpt.step, samples)
    }

    fn assemble(
        cfg: RunConfig,
        model: NsUnet,
        heads: Heads,
        store: ParamStore<f32>,
        optim: Sgd<f32>,
        step: usize,
        samples: &[Sample],
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("pre-training needs at least one sample".into()));
        }
        let want_2d = cfg.model.dimensionality == Dimensionality::D2;
        let mut prepared = Vec::with_capacity(samples.len());
        for s in samples {
            if s.payload.is_2d() != want_2d || s.payload.channels != cfg.model.in_channels {
                return shape_err(format!("sample {} does not match the model input ({:?})", s.id, cfg.model.dimensionality));
            }
            let n = s.normalized(cfg.data.pretrain_hu_window);
            prepared.push(PretrainSample { volume: n.payload, ct: s.hu_flag && s.modality == Modality::Ct3d });
        }
        let batch = cfg.trainer.batch_size.min(prepared.len());
        if batch < 2 {
            return Err(Error::Config(format!("pre-training needs at least 2 samples per batch, have {}", prepared.len())));
        }
        let steps_per_epoch = prepared.len() / batch;
        let views = cfg.view_config();
        Ok(Self { cfg, model, heads, store, optim, step, samples: prepared, batch, steps_per_epoch, views, dump: DumpOptions::default(), last_meta: Vec::new() })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.trainer.epochs * self.steps_per_epoch
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    /// Sample indices of step `step`.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let within = step % self.steps_per_epoch;
        let mut perm: Vec<usize> = (0..self.samples.len()).collect();
        perm.shuffle(&mut seed::rng(self.cfg.seed, Stream::Shuffle, &[epoch as u64]));
        perm[within * self.batch..(within + 1) * self.batch].to_vec()
    }

    fn view_set(&self, epoch: usize, index: usize) -> Result<ViewSet> {
        let s = &self.samples[index];
        let seed = seed::derive(self.cfg.seed, Stream::Views, &[epoch as u64, index as u64]);
        if s.ct && self.cfg.data.reject_background && !s.volume.is_2d() {
            let accept = background_filter(&s.volume, &self.cfg.data);
            make_view_set(&s.volume, &self.views, seed, &accept)
        } else {
            make_view_set(&s.volume, &self.views, seed, &|_: &Box3| true)
        }
    }

    /// The view sets of step `step`, built on `num_workers` threads.
    pub fn view_sets(&self, step: usize) -> Result<Vec<ViewSet>> {
        let epoch = step / self.steps_per_epoch;
        let idx = self.batch_indices(step);
        let workers = self.cfg.trainer.num_workers.min(idx.len());
        if workers <= 1 {
            return idx.iter().map(|&i| self.view_set(epoch, i)).collect();
        }
        let chunk = idx.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = idx
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&i| self.view_set(epoch, i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(idx.len());
            for h in handles {
                out.extend(h.join().map_err(|_| Error::Config("view worker panicked".into()))??);
            }
            Ok(out)
        })
    }

    /// One optimisation step; returns the loss terms evaluated before the
    /// update.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step;
        let sets = self.view_sets(step)?;
        if self.dump.crops || self.dump.augment_params {
            self.last_meta = self.batch_indices(step).into_iter().zip(sets.iter().map(|s| s.meta.clone())).collect();
        }
        let batch = ViewBatch::<f32>::from_view_sets(&sets)?;
        let scale = sample_scale(&mut seed::rng(self.cfg.seed, Stream::Scale, &[step as u64]));
        let mut g = Graph::new(true);
        let (loss, breakdown) = total_loss(&mut g, &self.model, &self.heads, &self.store, &batch, scale, &self.cfg.objective)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("{breakdown:?}") });
        }
        let grads = g.backward(loss)?.params();
        if let Some((k, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite { step, detail: format!("gradient of {k} is not finite; losses {breakdown:?}") });
        }
        let lr = cosine_lr(step, self.total_steps(), self.cfg.trainer.lr);
        self.optim.step(&mut self.store, &grads, lr)?;
        self.store.apply_bn_observations(&g.bn_observations);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::to_value(&self.cfg).expect("config serialises"),
            store: self.store.clone(),
            momentum: self.optim.buffers.clone(),
            epoch: self.epoch(),
            step: self.step,
            seed: self.cfg.seed,
            extra: json!({"kind": "pretrain"}),
        }
    }

    /// Runs until `total_steps`, writing `losses.csv` and checkpoints to
    /// `out` when given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainReport> {
        let started = Instant::now();
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("losses.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = if fresh { fs::File::create(&path)? } else { fs::OpenOptions::new().append(true).open(&path)? };
                if fresh {
                    writeln!(f, "{}", StepRecord::CSV_HEADER)?;
                }
                Some(f)
            }
            None => None,
        };
        let open_dump = |on: bool, name: &str| -> Result<Option<fs::File>> {
            match (out, on) {
                (Some(dir), true) => Ok(Some(fs::OpenOptions::new().create(true).append(true).open(dir.join(name))?)),
                _ => Ok(None),
            }
        };
        let mut crops_file = open_dump(self.dump.crops, "crops.jsonl")?;
        let mut aug_file = open_dump(self.dump.augment_params, "augment_params.jsonl")?;
        let mut report = TrainReport::default();
        let mut epoch_rows: Vec<StepRecord> = Vec::new();
        let total = self.total_steps();
        while self.step < total {
            let step = self.step;
            let b = match self.train_step() {
                Ok(b) => b,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out {
                        let dump = json!({"step": step, "error": e.to_string(), "params_finite": self.store.is_finite()});
                        fs::write(dir.join(format!("nonfinite_step{step}.json")), serde_json::to_vec_pretty(&dump)?)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let row = StepRecord::from_breakdown(step, &b);
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv_row())?;
            }
            for (sample, meta) in &self.last_meta {
                if let Some(f) = crops_file.as_mut() {
                    writeln!(f, "{}", json!({"step": step, "sample": sample, "crops": meta.crops}))?;
                }
                if let Some(f) = aug_file.as_mut() {
                    writeln!(f, "{}", json!({"step": step, "sample": sample, "global": meta.global, "corrupt": meta.corrupt, "locals": meta.locals}))?;
                }
            }
            log::debug!("step {step} scale {} total {:.5}", row.scale, row.total);
            epoch_rows.push(row.clone());
            report.steps.push(row);
            if self.step % self.steps_per_epoch == 0 {
                let epoch = self.step / self.steps_per_epoch;
                let summary = EpochSummary::from_records(epoch, &epoch_rows);
                log::info!("epoch {epoch}: total {:.5} restore {:.5}", summary.mean_total, summary.mean_l_restore);
                report.epochs.push(summary);
                epoch_rows.clear();
                let every = self.cfg.trainer.checkpoint_every;
                if let (Some(dir), true) = (out, every > 0 && epoch % every == 0 && self.step < total) {
                    self.checkpoint().save(&dir.join(format!("checkpoint_epoch{epoch}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = out {
            let path = dir.join("checkpoint.ckpt");
            self.checkpoint().save(&path)?;
            report.checkpoint_path = Some(path);
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Pre-trains from scratch; see [`Pretrainer::run`].
pub fn pretrain(cfg: &RunConfig, samples: &[Sample], out: Option<&Path>) -> Result<(Checkpoint, TrainReport)> {
    let mut t = Pretrainer::new(cfg.clone(), samples)?;
    if let Some(dir) = out {
        cfg.persist(dir)?;
    }
    let report = t.run(out)?;
    Ok((t.checkpoint(), report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Encoder (optionally transferred) plus a task head: GAP + affine over
/// the bottleneck for classification, or a fresh decoder and a 1x1 mask
/// convolution over `F5` for segmentation.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub task: Task,
    pub cfg: RunConfig,
    pub model: NsUnet,
    pub store: ParamStore<f32>,
    pub num_classes: usize,
    cls: Linear,
    seg: Conv,
}

impl FinetuneModel {
    fn layout(cfg: &RunConfig, task: Task, num_classes: usize) -> Result<(NsUnet, Linear, Conv)> {
        let mut mc = cfg.model.clone();
        if task == Task::Segment {
            mc.use_skip_connections = cfg.finetune.seg_skip_connections;
        }
        let model = NsUnet::new(mc)?;
        let bottleneck = model.config.stage_widths()[4];
        let cls = Linear::new("cls.fc", bottleneck, num_classes, true);
        let k = cfg.model.dimensionality.kernel(1);
        let seg = Conv::new("seg.out", cfg.model.decoder_channels, num_classes, k, [1; 3], true);
        Ok((model, cls, seg))
    }

    /// Fresh task model; `encoder` supplies transferred `encoder.*` weights
    /// (`None` trains from scratch).
    pub fn new(cfg: &RunConfig, task: Task, num_classes: usize, encoder: Option<&ParamStore<f32>>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let (model, cls, seg) = Self::layout(cfg, task, num_classes)?;
        let init_seed = seed::derive(cfg.seed, Stream::Init, &[2]);
        let mut store = model.init_params::<f32>(init_seed);
        if task == Task::Classify {
            store.params.retain(|k, _| k.starts_with("encoder."));
            store.buffers.retain(|k, _| k.starts_with("encoder."));
        }
        let mut rng = seed::rng(init_seed, Stream::Init, &[3]);
        match task {
            Task::Classify => cls.init(&mut store, &mut rng),
            Task::Segment => seg.init(&mut store, &mut rng),
        }
        if let Some(src) = encoder {
            for (k, v) in src.params.iter().chain(src.buffers.iter()).filter(|(k, _)| k.starts_with("encoder.")) {
                let slot = store.params.get(k).or_else(|| store.buffers.get(k));
                match slot {
                    Some(t) if t.shape() == v.shape() => {}
                    _ => return shape_err(format!("checkpoint encoder tensor {k} does not fit the configured model")),
                }
            }
            let copied = store.copy_prefix_from(src, "encoder.");
            let expected = store.params.keys().chain(store.buffers.keys()).filter(|k| k.starts_with("encoder.")).count();
            if copied != expected {
                return shape_err(format!("checkpoint provides {copied} of {expected} encoder tensors"));
            }
        }
        Ok(Self { task, cfg: cfg.clone(), model, store, num_classes, cls, seg })
    }

    /// Logits: `[N, K, 1, 1, 1]` (classify) or `[N, K, d0, d1, d2]` (segment).
    pub fn forward(&self, g: &mut Graph<f32>, x: NodeId) -> Result<NodeId> {
        match self.task {
            Task::Classify => {
                let f0 = self.model.encoder_features(g, &self.store, x)?;
                let pooled = g.gap(f0);
                self.cls.forward(g, &self.store, pooled)
            }
            Task::Segment => {
                let p = self.model.forward_pyramid(g, &self.store, x)?;
                self.seg.forward(g, &self.store, p.level(5))
            }
        }
    }

    pub fn to_checkpoint(&self, step: usize) -> Checkpoint {
        Checkpoint {
            config: serde_json::to_value(&self.cfg).expect("config serialises"),
            store: self.store.clone(),
            momentum: BTreeMap::new(),
            epoch: 0,
            step,
            seed: self.cfg.seed,
            extra: json!({"kind": "finetune", "task": self.task, "num_classes": self.num_classes}),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.extra.get("kind").and_then(Value::as_str) != Some("finetune") {
            return Err(Error::Format("not a fine-tuned model checkpoint".into()));
        }
        let cfg: RunConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let task: Task = serde_json::from_value(ckpt.extra["task"].clone()).map_err(|e| Error::Format(format!("checkpoint task: {e}")))?;
        let num_classes = ckpt.extra["num_classes"].as_u64().ok_or_else(|| Error::Format("checkpoint lacks num_classes".into()))? as usize;
        let (model, cls, seg) = Self::layout(&cfg, task, num_classes)?;
        Ok(Self { task, cfg, model, store: ckpt.store.clone(), num_classes, cls, seg })
    }
}

/// Network input and target of one labelled sample.
#[derive(Clone, Debug)]
pub struct LabeledInput {
    pub input: Volume,
    pub labels: Vec<bool>,
    pub mask: Option<Volume>,
}

/// Normalises with the fine-tuning HU window and resizes to the configured
/// input grid. Masks are resized linearly and re-binarised at 0.5.
pub fn prepare_labeled(cfg: &RunConfig, task: Task, samples: &[Sample]) -> Result<Vec<LabeledInput>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let n = s.normalized(cfg.data.finetune_hu_window);
        let target = if n.payload.is_2d() {
            Some([1, cfg.finetune.input_size_2d, cfg.finetune.input_size_2d])
        } else {
            cfg.finetune.input_size_3d
        };
        let resize = |v: &Volume| match target {
            Some(t) if t != v.dims => v.resize(t),
            _ => v.clone(),
        };
        let input = resize(&n.payload);
        let (labels, mask) = match task {
            Task::Classify => {
                let l = s.labels.clone().ok_or_else(|| Error::Config(format!("sample {} has no class labels", s.id)))?;
                (l, None)
            }
            Task::Segment => {
                let m = s.mask.as_ref().ok_or_else(|| Error::Config(format!("sample {} has no mask", s.id)))?;
                let mut r = resize(m);
                r.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
                (Vec::new(), Some(r))
            }
        };
        out.push(LabeledInput { input, labels, mask });
    }
    if let Some(first) = out.first() {
        if out.iter().any(|o| o.input.dims != first.input.dims) {
            return shape_err("samples differ in size; set finetune.input_size_3d to resize them");
        }
    }
    Ok(out)
}

fn class_count(task: Task, data: &[LabeledInput]) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Config("no labelled samples".into()))?;
    let k = match task {
        Task::Classify => first.labels.len(),
        Task::Segment => first.mask.as_ref().map_or(0, |m| m.channels),
    };
    let consistent = data.iter().all(|d| match task {
        Task::Classify => d.labels.len() == k,
        Task::Segment => d.mask.as_ref().is_some_and(|m| m.channels == k),
    });
    if !consistent {
        return shape_err("samples disagree on class count");
    }
    Ok(k)
}

fn targets(task: Task, items: &[&LabeledInput]) -> Result<Tensor<f32>> {
    match task {
        Task::Classify => {
            let k = items[0].labels.len();
            let data = items.iter().flat_map(|d| d.labels.iter().map(|&l| if l { 1.0 } else { 0.0 })).collect();
            Tensor::from_vec([items.len(), k, 1, 1, 1], data)
        }
        Task::Segment => {
            let masks: Vec<&Volume> = items.iter().map(|d| d.mask.as_ref().expect("segment inputs carry masks")).collect();
            Volume::stack(&masks)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: Task,
    pub losses: Vec<f64>,
    pub train_metrics: Value,
    pub wall_clock_secs: f64,
}

/// Fine-tunes a task model on `train`. `checkpoint` supplies a
/// pre-trained encoder; `None` trains from scratch.
pub fn finetune(cfg: &RunConfig, task: Task, checkpoint: Option<&Checkpoint>, train: &[Sample]) -> Result<(FinetuneModel, FinetuneReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_labeled(cfg, task, train)?;
    let k = class_count(task, &data)?;
    let mut fm = FinetuneModel::new(cfg, task, k, checkpoint.map(|c| &c.store))?;
    let batch = cfg.finetune.batch_size.min(data.len());
    if batch < 2 {
        return Err(Error::Config("fine-tuning needs at least 2 labelled samples".into()));
    }
    let steps_per_epoch = data.len() / batch;
    let total = steps_per_epoch * cfg.finetune.epochs;
    let mut optim = Sgd::<f32>::new(cfg.trainer.momentum, cfg.trainer.weight_decay);
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let epoch = step / steps_per_epoch;
        let within = step % steps_per_epoch;
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut seed::rng(cfg.seed, Stream::Shuffle, &[u64::MAX, epoch as u64]));
        let items: Vec<&LabeledInput> = perm[within * batch..(within + 1) * batch].iter().map(|&i| &data[i]).collect();
        let inputs: Vec<&Volume> = items.iter().map(|d| &d.input).collect();
        let mut g = Graph::new(true);
        if cfg.finetune.freeze_encoder {
            g.freeze_prefix("encoder.");
        }
        let x = g.input(Volume::stack(&inputs)?);
        let logits = fm.forward(&mut g, x)?;
        let y = targets(task, &items)?;
        let loss = match task {
            Task::Classify => g.bce_with_logits(logits, y)?,
            Task::Segment => g.soft_dice_loss(logits, y, cfg.finetune.dice_eps)?,
        };
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("fine-tuning loss {value}") });
        }
        let grads = g.backward(loss)?.params();
        optim.step(&mut fm.store, &grads, cosine_lr(step, total, cfg.finetune.lr))?;
        fm.store.apply_bn_observations(&g.bn_observations);
        losses.push(value);
    }
    let train_metrics = evaluate_prepared(&fm, &data)?;
    Ok((fm, FinetuneReport { task, losses, train_metrics, wall_clock_secs: started.elapsed().as_secs_f64() }))
}

/// Per-sample outputs in eval mode: sigmoid scores for classification,
/// binarised masks (logit > 0) for segmentation.
fn predict(fm: &FinetuneModel, data: &[LabeledInput]) -> Result<Vec<Vec<f64>>> {
    let chunk = fm.cfg.finetune.batch_size.max(1);
    let mut out = Vec::with_capacity(data.len());
    for part in data.chunks(chunk) {
        let inputs: Vec<&Volume> = part.iter().map(|d| &d.input).collect();
        let mut g = Graph::new(false);
        let x = g.input(Volume::stack(&inputs)?);
        let logits = fm.forward(&mut g, x)?;
        let v = g.value(logits);
        let per = v.len() / part.len();
        for n in 0..part.len() {
            out.push(v.data()[n * per..(n + 1) * per].iter().map(|&z| crate::autograd::sigmoid(z as f64)).collect());
        }
    }
    Ok(out)
}

fn evaluate_prepared(fm: &FinetuneModel, data: &[LabeledInput]) -> Result<Value> {
    let k = class_count(fm.task, data)?;
    if k != fm.num_classes {
        return shape_err(format!("model has {} classes, data has {k}", fm.num_classes));
    }
    let preds = predict(fm, data)?;
    match fm.task {
        Task::Classify => {
            let labels: Vec<Vec<bool>> = data.iter().map(|d| d.labels.clone()).collect();
            let m = multilabel_auroc(&preds, &labels)?;
            Ok(json!({"task": "classify", "num_samples": data.len(), "per_class_auroc": m.per_class, "mean_auroc": m.mean}))
        }
        Task::Segment => {
            let mut per_class = vec![0.0; k];
            for (d, p) in data.iter().zip(&preds) {
                let m = d.mask.as_ref().expect("segment inputs carry masks");
                let vox = m.voxels();
                for (c, acc) in per_class.iter_mut().enumerate() {
                    let pm: Vec<bool> = p[c * vox..(c + 1) * vox].iter().map(|&s| s > 0.5).collect();
                    let gm: Vec<bool> = m.channel(c).iter().map(|&v| v >= 0.5).collect();
                    *acc += dice(&pm, &gm)?;
                }
            }
            per_class.iter_mut().for_each(|d| *d /= data.len() as f64);
            let mean = per_class.iter().sum::<f64>() / k as f64;
            Ok(json!({"task": "segment", "num_samples": data.len(), "per_class_dice": per_class, "mean_dice": mean}))
        }
    }
}

/// Metrics of a fine-tuned model on `samples`.
pub fn evaluate(fm: &FinetuneModel, samples: &[Sample]) -> Result<Value> {
    let data = prepare_labeled(&fm.cfg, fm.task, samples)?;
    evaluate_prepared(fm, &data)
}
