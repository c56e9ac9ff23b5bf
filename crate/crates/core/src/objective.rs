//! Multi-scale restoration loss, siamese comparison loss with
//! stop-gradient, and the global-local total objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, DEGENERATE_NORM};
use crate::error::{shape_err, Error, Result};
use crate::heads::{ComparisonHead, Heads};
use crate::nsunet::{EncoderTap, NsUnet, Pyramid, LEVELS};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Pyramid level `i` in `1..=5`, shared by both branches and both tasks
/// within one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleIndex(pub usize);

impl ScaleIndex {
    pub fn new(i: usize) -> Result<Self> {
        if (1..=LEVELS).contains(&i) {
            Ok(Self(i))
        } else {
            Err(Error::Config(format!("scale {i} outside 1..={LEVELS}")))
        }
    }
}

pub fn sample_scale(rng: &mut impl Rng) -> ScaleIndex {
    ScaleIndex(rng.random_range(1..=LEVELS))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    /// Compare the two branches at the sampled scale only.
    #[default]
    Pairwise,
    /// Average over all 25 cross-scale pairs.
    Crossed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub comparison: ComparisonMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_restore: f64,
    pub l_compare_global: f64,
    /// Sum over the `2 * num_local` local-global terms.
    pub l_compare_local: f64,
    pub total: f64,
    pub scale_used: ScaleIndex,
    pub restore_terms: usize,
    pub compare_terms: usize,
    /// Value of every comparison term, global pair first.
    pub compare_values: Vec<f64>,
}

/// Cosine similarity of two vectors.
pub fn cosine(u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return shape_err(format!("cosine of lengths {} and {}", u.len(), w.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    for norm in [nu, nw] {
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
    }
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nw)).clamp(-1.0, 1.0))
}

/// `MSE(pred1, x1) + MSE(pred2, x2)`.
pub fn restoration_loss<T: Scalar>(g: &mut Graph<T>, pred1: NodeId, x1: NodeId, pred2: NodeId, x2: NodeId) -> Result<NodeId> {
    let a = g.mse(pred1, x1)?;
    let b = g.mse(pred2, x2)?;
    g.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

/// An embedding `v` together with its prediction `f_P(v)`.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub v: NodeId,
    pub p: NodeId,
}

pub fn embed_and_predict<T: Scalar>(g: &mut Graph<T>, head: &ComparisonHead, store: &ParamStore<T>, feature: NodeId) -> Result<Embedded> {
    let v = head.embed(g, store, feature)?;
    let p = head.predict(g, store, v)?;
    Ok(Embedded { v, p })
}

/// `-1/2 [cos(sg(v), f_P(v_s)) + cos(f_P(v), sg(v_s))]`, batch mean.
pub fn compare<T: Scalar>(g: &mut Graph<T>, a: Embedded, b: Embedded) -> Result<NodeId> {
    let sv = g.detach(a.v);
    let svs = g.detach(b.v);
    let c1 = g.cosine_mean(sv, b.p)?;
    let c2 = g.cosine_mean(a.p, svs)?;
    g.weighted_sum(&[(c1, -0.5), (c2, -0.5)])
}

/// Comparison loss between embeddings `v` and `v_s` through the head's
/// predictor.
pub fn comparison_loss<T: Scalar>(g: &mut Graph<T>, head: &ComparisonHead, store: &ParamStore<T>, v: NodeId, v_s: NodeId) -> Result<NodeId> {
    let p = head.predict(g, store, v)?;
    let ps = head.predict(g, store, v_s)?;
    compare(g, Embedded { v, p }, Embedded { v: v_s, p: ps })
}

/// Mean of the comparison loss over every scale pair `(i, j)` of two
/// pyramids' embeddings.
pub fn comparison_loss_crossed<T: Scalar>(g: &mut Graph<T>, a: &[Embedded], b: &[Embedded]) -> Result<NodeId> {
    if a.is_empty() || b.is_empty() {
        return shape_err("crossed comparison needs at least one scale per side");
    }
    let mut terms = Vec::with_capacity(a.len() * b.len());
    let w = 1.0 / (a.len() * b.len()) as f64;
    for &ea in a {
        for &eb in b {
            terms.push((compare(g, ea, eb)?, w));
        }
    }
    g.weighted_sum(&terms)
}

/// Batched inputs for one iteration. `locals[k]` holds local view `k` of
/// every sample.
#[derive(Clone, Debug)]
pub struct ViewBatch<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub x1c: Tensor<T>,
    pub x2c: Tensor<T>,
    pub locals: Vec<Tensor<T>>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn from_view_sets(sets: &[crate::augment::ViewSet]) -> Result<Self> {
        use crate::volume::Volume;
        if sets.is_empty() {
            return shape_err("empty view batch");
        }
        let pick = |f: fn(&crate::augment::ViewSet) -> &Volume| -> Result<Tensor<T>> {
            let items: Vec<&Volume> = sets.iter().map(f).collect();
            Volume::stack(&items)
        };
        let num_local = sets[0].locals.len();
        if sets.iter().any(|s| s.locals.len() != num_local) {
            return shape_err("view sets disagree on local view count");
        }
        let mut locals = Vec::with_capacity(num_local);
        for k in 0..num_local {
            let items: Vec<&Volume> = sets.iter().map(|s| &s.locals[k]).collect();
            locals.push(Volume::stack(&items)?);
        }
        Ok(Self { x1: pick(|s| &s.x1)?, x2: pick(|s| &s.x2)?, x1c: pick(|s| &s.x1c)?, x2c: pick(|s| &s.x2c)?, locals })
    }

    pub fn batch(&self) -> usize {
        self.x1.batch()
    }
}

fn spatial_of<T: Scalar>(g: &Graph<T>, id: NodeId) -> [usize; 3] {
    let s = g.shape(id);
    [s[2], s[3], s[4]]
}

/// Builds the full objective on `g`. Returns the scalar node to
/// differentiate and the value breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &NsUnet,
    heads: &Heads,
    store: &ParamStore<T>,
    batch: &ViewBatch<T>,
    scale: ScaleIndex,
    cfg: &ObjectiveConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let i = scale.0;
    let n = batch.batch();
    let depth = match cfg.comparison {
        ComparisonMode::Pairwise => i,
        ComparisonMode::Crossed => LEVELS,
    };
    let x1 = g.input(batch.x1.clone());
    let x2 = g.input(batch.x2.clone());
    let x1c = g.input(batch.x1c.clone());
    let x2c = g.input(batch.x2c.clone());
    let p1 = model.forward_levels(g, store, x1c, depth, EncoderTap::Normal)?;
    let p2 = model.forward_levels(g, store, x2c, depth, EncoderTap::Normal)?;

    let head = heads.restoration(i);
    let r1 = head.restore(g, store, p1.level(i), spatial_of(g, x1))?;
    let r2 = head.restore(g, store, p2.level(i), spatial_of(g, x2))?;
    let l_restore = restoration_loss(g, r1, x1, r2, x2)?;

    let cmp = &heads.compare;
    let embed_levels = |g: &mut Graph<T>, p: &Pyramid| -> Result<Vec<Embedded>> {
        match cfg.comparison {
            ComparisonMode::Pairwise => Ok(vec![embed_and_predict(g, cmp, store, p.level(i))?]),
            ComparisonMode::Crossed => p.levels.iter().map(|&f| embed_and_predict(g, cmp, store, f)).collect(),
        }
    };
    let e1 = embed_levels(g, &p1)?;
    let e2 = embed_levels(g, &p2)?;
    let pair = |g: &mut Graph<T>, a: &[Embedded], b: &[Embedded]| -> Result<NodeId> {
        match cfg.comparison {
            ComparisonMode::Pairwise => compare(g, a[0], b[0]),
            ComparisonMode::Crossed => comparison_loss_crossed(g, a, b),
        }
    };
    let l_global = pair(g, &e1, &e2)?;
    let mut compare_nodes = vec![l_global];

    let mut local_terms = Vec::new();
    if !batch.locals.is_empty() {
        let parts: Vec<&Tensor<T>> = batch.locals.iter().collect();
        let all = Tensor::cat_batch(&parts)?;
        let xl = g.input(all);
        let pl = model.forward_levels(g, store, xl, depth, EncoderTap::Normal)?;
        let el_all = embed_levels(g, &pl)?;
        for k in 0..batch.locals.len() {
            let mut ek = Vec::with_capacity(el_all.len());
            for e in &el_all {
                let v = g.slice_batch(e.v, k * n, n)?;
                let p = g.slice_batch(e.p, k * n, n)?;
                ek.push(Embedded { v, p });
            }
            for eg in [&e1, &e2] {
                let t = pair(g, &ek, eg)?;
                local_terms.push((t, 1.0));
                compare_nodes.push(t);
            }
        }
    }
    let l_local = if local_terms.is_empty() { None } else { Some(g.weighted_sum(&local_terms)?) };

    let mut parts = vec![(l_restore, 1.0), (l_global, 1.0)];
    if let Some(l) = l_local {
        parts.push((l, 1.0));
    }
    let total = g.weighted_sum(&parts)?;
    let val = |g: &Graph<T>, id: NodeId| g.value(id).item().as_f64();
    let breakdown = LossBreakdown {
        l_restore: val(g, l_restore),
        l_compare_global: val(g, l_global),
        l_compare_local: l_local.map_or(0.0, |l| val(g, l)),
        total: val(g, total),
        scale_used: scale,
        restore_terms: 1,
        compare_terms: compare_nodes.len(),
        compare_values: compare_nodes.iter().map(|&c| val(g, c)).collect(),
    };
    Ok((total, breakdown))
}
