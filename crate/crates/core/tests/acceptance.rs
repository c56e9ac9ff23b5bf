//! End-to-end acceptance suite. Every criterion prints one
//! `acceptance criterion N <name> PASS|FAIL` line and fails its test on FAIL.
//! Criteria run one at a time so wall-clock bounds are meaningful.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyramid_ssl::autograd::{Graph, NodeId};
use pyramid_ssl::checkpoint::Checkpoint;
use pyramid_ssl::config::RunConfig;
use pyramid_ssl::data::{
    background_filter, background_fraction, hu_to_unit, is_rejected_background, make_splits, synth_dataset, truncate_hu, DataConfig,
    SynthConfig, SynthKind,
};
use pyramid_ssl::geometry::{iou, iou_ratio, min_bounding_box, sub_crop, Box3, SubCropConfig};
use pyramid_ssl::heads::{Heads, PredictorKind};
use pyramid_ssl::layers::Dimensionality;
use pyramid_ssl::metrics::{auroc, dice};
use pyramid_ssl::nsunet::{trace_shapes, EncoderTap, ModelConfig, NsUnet, LEVELS};
use pyramid_ssl::objective::{compare, embed_and_predict, restoration_loss, total_loss, Embedded, ObjectiveConfig, ScaleIndex, ViewBatch};
use pyramid_ssl::params::ParamStore;
use pyramid_ssl::tensor::Tensor;
use pyramid_ssl::trainer::{evaluate, finetune, Pretrainer, Task};
use pyramid_ssl::volume::Volume;

static SERIAL: Mutex<()> = Mutex::new(());

struct Outcome {
    number: u32,
    name: &'static str,
    checks: Vec<(String, bool)>,
    started: Instant,
    budget: Option<Duration>,
}

impl Outcome {
    fn new(number: u32, name: &'static str, budget: Option<Duration>) -> Self {
        Self { number, name, checks: Vec::new(), started: Instant::now(), budget }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        let what = what.into();
        if !ok {
            eprintln!("  criterion {} check failed: {what}", self.number);
        }
        self.checks.push((what, ok));
    }

    fn finish(mut self) {
        let elapsed = self.started.elapsed();
        if let Some(b) = self.budget {
            self.check(format!("runtime {:.1}s within {}s", elapsed.as_secs_f64(), b.as_secs()), elapsed < b);
        }
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(
            stdout,
            "acceptance criterion {:>2} {:<32} {verdict} ({} checks, {:.1}s)",
            self.number,
            self.name,
            self.checks.len(),
            elapsed.as_secs_f64()
        );
        drop(stdout);
        for (what, ok) in &self.checks {
            eprintln!("    [{}] {what}", if *ok { "ok" } else { "FAIL" });
        }
        assert!(failed.is_empty(), "criterion {} failed: {failed:?}", self.number);
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand_tensor(shape: [usize; 5], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn tiny_2d(skip: bool) -> ModelConfig {
    ModelConfig {
        dimensionality: Dimensionality::D2,
        in_channels: 1,
        decoder_channels: 8,
        encoder_width_multiplier: 0.125,
        blocks_per_stage: 1,
        use_skip_connections: skip,
        encoder_widths: vec![],
    }
}

#[test]
fn criterion_01_geometry() {
    let _g = serial();
    let mut out = Outcome::new(1, "geometry suite", Some(Duration::from_secs(30)));
    let cfg = SubCropConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut iou_ok, mut sizes_ok, mut inside_ok, mut bbox_ok) = (true, true, true, true);
    for _ in 0..1000 {
        let r = sub_crop([192, 192, 192], &cfg, &mut rng, |_| true).unwrap();
        iou_ok &= iou(&r.global_a, &r.global_b) >= 0.3;
        sizes_ok &= cfg.global_sizes.contains(&r.global_a.size) && cfg.global_sizes.contains(&r.global_b.size);
        sizes_ok &= r.locals.len() == cfg.num_local && r.locals.iter().all(|l| cfg.local_sizes.contains(&l.size));
        bbox_ok &= r.bounding_box == min_bounding_box(&r.global_a, &r.global_b);
        inside_ok &= r.locals.iter().all(|l| r.bounding_box.contains(l));
    }
    out.check("every global pair has IoU >= 0.3", iou_ok);
    out.check("all sizes from the configured size sets", sizes_ok);
    out.check("bounding box is the minimum enclosing box", bbox_ok);
    out.check("all locals inside the bounding box", inside_ok);

    let mut exact = true;
    for _ in 0..500 {
        let mut b = || {
            let size = [0, 1, 2].map(|_| rng.random_range(1..=12usize));
            let origin = [0, 1, 2].map(|a| rng.random_range(0..=20 - size[a]));
            Box3::new(origin, size)
        };
        let (a, c) = (b(), b());
        let (mut inter, mut union) = (0u64, 0u64);
        for x in 0..20 {
            for y in 0..20 {
                for z in 0..20 {
                    let ina = (0..3).all(|k| [x, y, z][k] >= a.origin[k] && [x, y, z][k] < a.origin[k] + a.size[k]);
                    let inc = (0..3).all(|k| [x, y, z][k] >= c.origin[k] && [x, y, z][k] < c.origin[k] + c.size[k]);
                    inter += (ina && inc) as u64;
                    union += (ina || inc) as u64;
                }
            }
        }
        exact &= iou_ratio(&a, &c) == (inter, union) && iou(&a, &c) == inter as f64 / union as f64;
    }
    out.check("iou equals voxel-counting oracle on 500 pairs", exact);
    out.finish();
}

/// Restoration and comparison losses of the tiny model at `scale` as
/// separate graphs over the same parameters.
fn tiny_losses(
    model: &NsUnet,
    heads: &Heads,
    store: &ParamStore<f64>,
    views: &[Tensor<f64>; 4],
    scale: usize,
    which: &str,
    frozen: Option<&[Tensor<f64>; 2]>,
) -> (Graph<f64>, NodeId, [Tensor<f64>; 2]) {
    let mut g = Graph::new(true);
    let [x1, x2, x1c, x2c] = views.clone().map(|t| g.input(t));
    let p1 = model.forward_levels(&mut g, store, x1c, scale, EncoderTap::Normal).unwrap();
    let p2 = model.forward_levels(&mut g, store, x2c, scale, EncoderTap::Normal).unwrap();
    if which == "restore" {
        let h = heads.restoration(scale);
        let r1 = h.restore(&mut g, store, p1.level(scale), [1, 32, 32]).unwrap();
        let r2 = h.restore(&mut g, store, p2.level(scale), [1, 32, 32]).unwrap();
        let loss = restoration_loss(&mut g, r1, x1, r2, x2).unwrap();
        let none = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
        return (g, loss, none);
    }
    let mut e1 = embed_and_predict(&mut g, &heads.compare, store, p1.level(scale)).unwrap();
    let mut e2 = embed_and_predict(&mut g, &heads.compare, store, p2.level(scale)).unwrap();
    let targets = [g.value(e1.v).clone(), g.value(e2.v).clone()];
    // the stop-gradient targets are constants of the objective, so finite
    // differences hold them at their unperturbed values
    if let Some([v1, v2]) = frozen {
        e1.v = g.input(v1.clone());
        e2.v = g.input(v2.clone());
    }
    let loss = compare(&mut g, e1, e2).unwrap();
    (g, loss, targets)
}

#[test]
fn criterion_02_gradient_check() {
    let _g = serial();
    let mut out = Outcome::new(2, "gradient check", Some(Duration::from_secs(120)));
    let (model, mut store) = NsUnet::build::<f64>(tiny_2d(false), 11).unwrap();
    let heads = Heads::new(Dimensionality::D2, 8, 1, PredictorKind::Mlp);
    store.extend(heads.init_params(11));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let views = [0, 1, 2, 3].map(|_| rand_tensor([4, 1, 1, 32, 32], &mut rng));
    let h = 1e-4;
    let mut sampled = 0;
    let mut straddled = 0;
    let mut worst: f64 = 0.0;
    for (which, scales) in [("restore", [5, 2, 3]), ("compare", [4, 1, 5])] {
        for scale in scales {
            let (g, loss, targets) = tiny_losses(&model, &heads, &store, &views, scale, which, None);
            let base_pattern = g.branch_pattern();
            let grads = g.backward(loss).unwrap().params();
            let keys: Vec<&String> = grads.keys().collect();
            let mut valid = 0;
            for _ in 0..2000 {
                if valid == 20 {
                    break;
                }
                let key = keys[rng.random_range(0..keys.len())].clone();
                let idx = rng.random_range(0..grads[&key].len());
                let analytic = grads[&key].data()[idx];
                let eval_at = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(&key).unwrap().data_mut()[idx] += delta;
                    let (g, l, _) = tiny_losses(&model, &heads, &s, &views, scale, which, Some(&targets));
                    (g.value(l).item(), g.branch_pattern())
                };
                let ((plus, pp), (minus, pm)) = (eval_at(h), eval_at(-h));
                // a ReLU or max-pool switch inside [-h, h] leaves the
                // difference quotient without a derivative to match
                if pp != base_pattern || pm != base_pattern {
                    straddled += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                if rel >= 1e-4 {
                    eprintln!("  {which} scale {scale} {key}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
                }
                worst = worst.max(rel);
                valid += 1;
                sampled += 1;
            }
        }
    }
    eprintln!("  criterion 2: {straddled} draws straddled a ReLU/max-pool switch and were redrawn");
    out.check(format!("{sampled} sampled parameters (>= 100)"), sampled >= 100);
    out.check(format!("max relative error {worst:e} < 1e-4"), worst < 1e-4);
    out.finish();
}

#[test]
fn criterion_03_stop_gradient() {
    let _g = serial();
    let mut out = Outcome::new(3, "stop-gradient contract", Some(Duration::from_secs(30)));
    let (model, mut store) = NsUnet::build::<f64>(tiny_2d(false), 3).unwrap();
    let heads = Heads::new(Dimensionality::D2, 8, 1, PredictorKind::Mlp);
    store.extend(heads.init_params(3));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xa = rand_tensor([2, 1, 1, 32, 32], &mut rng);
    let xb = rand_tensor([2, 1, 1, 32, 32], &mut rng);
    // terms: "full" = both cosines, "first" = cos(sg(v), p_s) only,
    // "second" = cos(p, sg(v_s)) only, "undetached" = cos(v, p_s)
    let run = |terms: &str| {
        let mut g = Graph::new(true);
        let x1 = g.variable(xa.clone());
        let x2 = g.variable(xb.clone());
        let f1 = model.forward_pyramid(&mut g, &store, x1).unwrap().level(3);
        let f2 = model.forward_pyramid(&mut g, &store, x2).unwrap().level(3);
        let a = embed_and_predict(&mut g, &heads.compare, &store, f1).unwrap();
        let b = embed_and_predict(&mut g, &heads.compare, &store, f2).unwrap();
        let loss = match terms {
            "full" => compare(&mut g, a, b).unwrap(),
            "first" => {
                let sv = g.detach(a.v);
                let c = g.cosine_mean(sv, b.p).unwrap();
                g.weighted_sum(&[(c, -0.5)]).unwrap()
            }
            "second" => {
                let svs = g.detach(b.v);
                let c = g.cosine_mean(a.p, svs).unwrap();
                g.weighted_sum(&[(c, -0.5)]).unwrap()
            }
            _ => {
                let c = g.cosine_mean(a.v, b.p).unwrap();
                g.weighted_sum(&[(c, -0.5)]).unwrap()
            }
        };
        let grads = g.backward(loss).unwrap();
        let get = |id: NodeId| grads.of(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; xa.len()]);
        (get(x1), get(x2))
    };
    let (full1, full2) = run("full");
    let (first1, first2) = run("first");
    let (second1, second2) = run("second");
    let (undet1, _) = run("undetached");
    out.check("sg(v) branch passes exactly zero gradient to view 1", first1.iter().all(|&v| v == 0.0));
    out.check("sg(v_s) branch passes exactly zero gradient to view 2", second2.iter().all(|&v| v == 0.0));
    out.check("view-1 gradient equals that of the non-detached term", full1 == second1);
    out.check("view-2 gradient equals that of the non-detached term", full2 == first2);
    out.check("without detach the same branch has non-zero gradient", undet1.iter().any(|&v| v != 0.0));
    out.finish();
}

#[test]
fn criterion_04_pyramid_shapes() {
    let _g = serial();
    let mut out = Outcome::new(4, "pyramid shape contract", None);
    let levels_of = |cfg: ModelConfig, dims: [usize; 3]| {
        let (m, s) = NsUnet::build::<f32>(cfg, 4).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(Tensor::full([1, 1, dims[0], dims[1], dims[2]], 0.5));
        let p = m.forward_pyramid(&mut g, &s, x).unwrap();
        let spatial = |id: NodeId| {
            let s = g.shape(id);
            [s[2], s[3], s[4]]
        };
        let enc: Vec<[usize; 3]> = p.encoder.iter().map(|&e| spatial(e)).collect();
        let lv: Vec<[usize; 3]> = p.levels.iter().map(|&l| spatial(l)).collect();
        let finite = p.levels.iter().all(|&l| g.value(l).is_finite());
        (enc, lv, finite)
    };
    let mut c2 = tiny_2d(false);
    c2.encoder_width_multiplier = 0.0625;
    let (_, lv, _) = levels_of(c2, [1, 224, 224]);
    let want: Vec<[usize; 3]> = [14, 28, 56, 112, 224].iter().map(|&r| [1, r, r]).collect();
    out.check(format!("224^2 levels {lv:?}"), lv == want);
    let c3 = RunConfig::desk_3d().model;
    let (enc, lv, _) = levels_of(c3.clone(), [64, 64, 32]);
    out.check(format!("64x64x32 F0 {:?}", enc[4]), enc[4] == [2, 2, 1]);
    out.check(format!("64x64x32 F5 {:?}", lv[4]), lv[4] == [64, 64, 32]);
    let traced = trace_shapes(Dimensionality::D3, [64, 64, 32]).unwrap();
    out.check("forward agrees with shape trace", traced.levels.to_vec() == lv);
    let (enc, lv, finite) = levels_of(c3, [16, 16, 16]);
    out.check(format!("16^3 local forwards (F0 {:?}, F5 {:?})", enc[4], lv[4]), lv.len() == LEVELS && lv[4] == [16, 16, 16] && finite);
    out.finish();
}

#[test]
fn criterion_05_non_skip_isolation() {
    let _g = serial();
    let mut out = Outcome::new(5, "non-skip isolation", None);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, skip) in [("no-skip", false), ("skip", true)] {
        for (dim, shape) in [(Dimensionality::D2, [2, 1, 1, 64, 64]), (Dimensionality::D3, [2, 1, 32, 32, 16])] {
            let mut cfg = tiny_2d(skip);
            cfg.dimensionality = dim;
            let (m, s) = NsUnet::build::<f64>(cfg, 5).unwrap();
            let x = rand_tensor(shape, &mut rng);
            let levels = |tap: EncoderTap| {
                let mut g = Graph::new(true);
                let xi = g.input(x.clone());
                let p = m.forward_levels(&mut g, &s, xi, LEVELS, tap).unwrap();
                p.levels.iter().map(|&l| g.value(l).clone()).collect::<Vec<_>>()
            };
            let same = levels(EncoderTap::Normal) == levels(EncoderTap::ZeroNonBottleneck);
            if skip {
                out.check(format!("{name} {dim:?}: zeroing encoder maps is visible (control)"), !same);
            } else {
                out.check(format!("{name} {dim:?}: pyramid unchanged exactly"), same);
            }
        }
    }
    out.finish();
}

#[test]
fn criterion_06_skip_ablation() {
    let _g = serial();
    let mut out = Outcome::new(6, "skip-ablation direction", Some(Duration::from_secs(600)));
    let samples = synth_dataset(SynthKind::Ct3dSeg, 16, 6, &SynthConfig::default());
    let mut curves = Vec::new();
    for skip in [true, false] {
        let mut cfg = RunConfig::desk_3d();
        cfg.seed = 6;
        cfg.trainer.epochs = 15;
        cfg.model.use_skip_connections = skip;
        let report = Pretrainer::new(cfg, &samples).unwrap().run(None).unwrap();
        curves.push(report.epochs.iter().map(|e| e.mean_l_restore).collect::<Vec<f64>>());
    }
    for epoch in [5, 10, 15] {
        let (with, without) = (curves[0][epoch - 1], curves[1][epoch - 1]);
        out.check(format!("epoch {epoch}: skip {with:.5} < no-skip {without:.5}"), with < without);
    }
    out.finish();
}

#[test]
fn criterion_07_loss_identities() {
    let _g = serial();
    let mut out = Outcome::new(7, "loss identities", None);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut g = Graph::<f64>::new(true);
    let x = g.input(rand_tensor([2, 1, 1, 8, 8], &mut rng));
    let y = g.input(rand_tensor([2, 1, 1, 8, 8], &mut rng));
    let l = restoration_loss(&mut g, x, x, y, y).unwrap();
    out.check("prediction == target gives zero restoration loss", g.value(l).item() == 0.0);

    let heads = Heads::new(Dimensionality::D2, 8, 1, PredictorKind::Identity);
    let store = heads.init_params::<f64>(7);
    let mut g = Graph::new(true);
    let f = g.input(rand_tensor([4, 8, 1, 4, 4], &mut rng));
    let a = embed_and_predict(&mut g, &heads.compare, &store, f).unwrap();
    let b = embed_and_predict(&mut g, &heads.compare, &store, f).unwrap();
    let c = compare(&mut g, a, b).unwrap();
    let v = g.value(c).item();
    out.check(format!("identity predictor on identical views gives {v}"), (v + 1.0).abs() < 1e-12);

    let (model, mut store) = NsUnet::build::<f64>(tiny_2d(false), 7).unwrap();
    let heads = Heads::new(Dimensionality::D2, 8, 1, PredictorKind::Mlp);
    store.extend(heads.init_params(7));
    let batch = ViewBatch {
        x1: rand_tensor([2, 1, 1, 32, 32], &mut rng),
        x2: rand_tensor([2, 1, 1, 32, 32], &mut rng),
        x1c: rand_tensor([2, 1, 1, 32, 32], &mut rng),
        x2c: rand_tensor([2, 1, 1, 32, 32], &mut rng),
        locals: (0..6).map(|_| rand_tensor([2, 1, 1, 16, 16], &mut rng)).collect(),
    };
    let mut g = Graph::new(true);
    let (_, b) = total_loss(&mut g, &model, &heads, &store, &batch, ScaleIndex(3), &ObjectiveConfig::default()).unwrap();
    out.check(format!("6 locals: {} comparison terms", b.compare_terms), b.compare_terms == 13 && b.compare_values.len() == 13);
    out.check(format!("6 locals: {} restoration term", b.restore_terms), b.restore_terms == 1);
    out.check("total equals the sum of its parts", (b.total - (b.l_restore + b.l_compare_global + b.l_compare_local)).abs() < 1e-6);

    let mut in_range = true;
    for i in 0..1000 {
        let heads = Heads::new(Dimensionality::D2, 8, 1, PredictorKind::Mlp);
        let store = heads.init_params::<f64>(1000 + i);
        let mut g = Graph::new(true);
        let fa = g.input(rand_tensor([2, 8, 1, 2, 2], &mut rng).map(|v| v * 4.0 - 2.0));
        let fb = g.input(rand_tensor([2, 8, 1, 2, 2], &mut rng).map(|v| v * 4.0 - 2.0));
        let a = embed_and_predict(&mut g, &heads.compare, &store, fa).unwrap();
        let b = embed_and_predict(&mut g, &heads.compare, &store, fb).unwrap();
        let t = compare(&mut g, a, b).unwrap();
        let val = g.value(t).item();
        in_range &= (-1.0..=1.0).contains(&val);
        let Embedded { v, p } = a;
        let cross = compare(&mut g, Embedded { v: p, p: v }, b).unwrap();
        in_range &= (-1.0..=1.0).contains(&g.value(cross).item());
    }
    out.check("1000 random comparison terms within [-1, 1]", in_range);
    out.finish();
}

fn smoothed(values: &[f64], from: usize, window: usize) -> f64 {
    values[from..from + window].iter().sum::<f64>() / window as f64
}

#[test]
fn criterion_08_optimization_smoke() {
    let _g = serial();
    let mut out = Outcome::new(8, "optimization smoke test", Some(Duration::from_secs(900)));
    let samples = synth_dataset(SynthKind::Ct3dSeg, 8, 8, &SynthConfig::default());
    let mut cfg = RunConfig::desk_3d();
    cfg.seed = 8;
    cfg.trainer.epochs = 100;
    let mut t = Pretrainer::new(cfg.clone(), &samples).unwrap();
    let report = t.run(None).unwrap();
    let totals: Vec<f64> = report.steps.iter().map(|s| s.total).collect();
    let restores: Vec<f64> = report.steps.iter().map(|s| s.l_restore).collect();
    out.check(format!("{} iterations", totals.len()), totals.len() == 200);
    let w = 20;
    let (first, last) = (smoothed(&totals, 0, w), smoothed(&totals, totals.len() - w, w));
    out.check(format!("smoothed total {first:.4} -> {last:.4} (<= 50%)"), last <= 0.5 * first);
    let (rf, rl) = (smoothed(&restores, 0, w), smoothed(&restores, restores.len() - w, w));
    out.check(format!("smoothed restoration {rf:.4} -> {rl:.4} (<= 50%)"), rl <= 0.5 * rf);

    let mut seg = cfg.clone();
    seg.finetune.epochs = 150;
    seg.finetune.batch_size = 2;
    seg.finetune.lr = 0.1;
    let ckpt = t.checkpoint();
    let (model, _) = finetune(&seg, Task::Segment, Some(&ckpt), &samples[..4]).unwrap();
    let m = evaluate(&model, &samples[..4]).unwrap();
    let d = m["mean_dice"].as_f64().unwrap();
    out.check(format!("train Dice {d:.4} >= 0.9 on 4 volumes"), d >= 0.9);

    let images = synth_dataset(SynthKind::Xray2d, 8, 8, &SynthConfig::default());
    let mut cls = RunConfig::desk_2d();
    cls.seed = 8;
    cls.finetune.epochs = 50;
    let (model, _) = finetune(&cls, Task::Classify, None, &images).unwrap();
    let m = evaluate(&model, &images).unwrap();
    let a = m["mean_auroc"].as_f64().unwrap();
    out.check(format!("train AUROC {a:.4} >= 0.99 on 8 images"), a >= 0.99);
    out.finish();
}

fn pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

#[test]
fn criterion_09_metric_oracles() {
    let _g = serial();
    let mut out = Outcome::new(9, "metric oracles", None);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 50 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        worst = worst.max((auroc(&scores, &labels).unwrap() - pair_oracle(&scores, &labels)).abs());
        instances += 1;
    }
    out.check(format!("auroc vs pair counting, max error {worst:e} <= 1e-12"), worst <= 1e-12);
    let t = [true, true, false, false];
    out.check("dice of identical masks is 1", dice(&t, &t).unwrap() == 1.0);
    out.check("dice of disjoint masks is 0", dice(&t, &[false, false, true, true]).unwrap() == 0.0);
    out.check("dice of half overlap is 0.5", dice(&t, &[true, false, true, false]).unwrap() == 0.5);
    out.finish();
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let _g = serial();
    let mut out = Outcome::new(10, "determinism and persistence", None);
    let samples = synth_dataset(SynthKind::Ct3dSeg, 4, 10, &SynthConfig::default());
    let mut cfg = RunConfig::desk_3d();
    cfg.seed = 10;
    cfg.trainer.batch_size = 2;
    cfg.trainer.epochs = 5;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for d in &dirs {
        reports.push(Pretrainer::new(cfg.clone(), &samples).unwrap().run(Some(d.path())).unwrap());
    }
    let csv = |i: usize| std::fs::read(dirs[i].path().join("losses.csv")).unwrap();
    out.check("identical seeds give identical losses.csv", csv(0) == csv(1) && reports[0].steps.len() == 10);

    let path = dirs[0].path().join("checkpoint.ckpt");
    let ckpt = Checkpoint::load(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    out.check("checkpoint load/save round trip is bit-exact", ckpt.to_bytes().unwrap() == bytes);

    let mut first = Pretrainer::new(cfg.clone(), &samples).unwrap();
    let mut resumed_losses = Vec::new();
    for _ in 0..5 {
        resumed_losses.push(first.train_step().unwrap().total);
    }
    let mid = dirs[1].path().join("interrupted.ckpt");
    first.checkpoint().save(&mid).unwrap();
    drop(first);
    let mut second = Pretrainer::resume(&Checkpoint::load(&mid).unwrap(), &samples).unwrap();
    for _ in 0..5 {
        resumed_losses.push(second.train_step().unwrap().total);
    }
    let straight: Vec<f64> = reports[0].steps.iter().map(|s| s.total).collect();
    let gap = straight.iter().zip(&resumed_losses).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.check(format!("resume matches uninterrupted run over 10 iterations (max gap {gap:e})"), resumed_losses.len() == 10 && gap <= 1e-6);
    out.finish();
}

#[test]
fn criterion_11_preprocessing() {
    let _g = serial();
    let mut out = Outcome::new(11, "preprocessing", None);
    let hu = Volume::from_vec(1, [1, 1, 7], vec![-3000.0, -1000.0, -500.0, 0.0, 500.0, 1000.0, 2500.0]).unwrap();
    let t = truncate_hu(&hu, -1000.0, 1000.0);
    out.check(format!("HU truncation {:?}", t.data), t.data == vec![0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    let ft = truncate_hu(&hu, -200.0, 200.0);
    out.check(format!("fine-tune window {:?}", ft.data), ft.data == vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);

    let cfg = DataConfig::default();
    let crop = |background: usize| {
        let data = (0..100).map(|i| if i < background { -1000.0 } else { 40.0 }).collect();
        Volume::from_vec(1, [4, 5, 5], data).unwrap()
    };
    out.check("85 of 100 background voxels: fraction 0.85", background_fraction(&crop(85), -150.0) == 0.85);
    out.check("exactly 85% background is kept", !is_rejected_background(&crop(85), -150.0, 0.85));
    out.check("86% background is rejected", is_rejected_background(&crop(86), -150.0, 0.85));
    let edge = Volume::from_vec(1, [1, 1, 4], vec![-150.0, -151.0, -150.0, -150.0]).unwrap();
    out.check("threshold voxels are not background", background_fraction(&edge, -150.0) == 0.25);
    let (lo, hi) = cfg.pretrain_hu_window;
    let norm = truncate_hu(&crop(86), lo, hi);
    let accept = background_filter(&norm, &cfg);
    out.check("normalised filter rejects the 86% crop", !accept(&Box3::whole([4, 5, 5])));
    let norm = truncate_hu(&crop(85), lo, hi);
    let accept = background_filter(&norm, &cfg);
    out.check("normalised filter keeps the 85% crop", accept(&Box3::whole([4, 5, 5])));
    out.check("threshold maps into the unit window", hu_to_unit(-150.0, lo, hi) == 0.425);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let r = rng.random_range(1..=100) as f64 / 100.0;
        let seed = rng.random();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
        let p = make_splits(&ids, r, seed).unwrap();
        let train = n * 7 / 10;
        let val = n / 10;
        ok &= p.train_ids.len() == train && p.val_ids.len() == val && p.test_ids.len() == n - train - val;
        let mut all: Vec<&String> = p.train_ids.iter().chain(&p.val_ids).chain(&p.test_ids).collect();
        all.sort();
        all.dedup();
        ok &= all.len() == n;
        let mut union: Vec<&String> = p.pretrain_ids.iter().chain(&p.finetune_ids).collect();
        union.sort();
        let mut tr: Vec<&String> = p.train_ids.iter().collect();
        tr.sort();
        ok &= union == tr;
        ok &= p.finetune_ids.len() == (r * train as f64 + 1e-9).floor() as usize;
        ok &= make_splits(&ids, r, seed).unwrap() == p;
    }
    out.check("split invariants over 100 random (n, r, seed)", ok);
    out.finish();
}
