//! Self-supervised task heads: one pixel-restoration head per pyramid level
//! and a single comparison head (GAP + shared BN embedding, MLP predictor)
//! used by every level and both siamese branches.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::layers::{BatchNorm, Conv, ConvBnRelu, Dimensionality, Linear};
use crate::nsunet::LEVELS;
use crate::params::ParamStore;
use crate::seed::{self, Stream};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Mlp,
    /// `f_P(v) = v`; used by ablations and loss identities.
    Identity,
}

#[derive(Clone, Debug)]
pub struct RestorationHead {
    pub level: usize,
    block: ConvBnRelu,
    out: Conv,
}

impl RestorationHead {
    /// `restore(F_i)`: Conv-BN-ReLU then Conv, followed by linear
    /// interpolation up to `target` so every level predicts the full image.
    pub fn restore<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feature: NodeId,
        target: [usize; 3],
    ) -> Result<NodeId> {
        let s = g.shape(feature);
        if s[1] != self.block.conv.cin {
            return shape_err(format!(
                "restoration head {} expects {} channels, got {}",
                self.level, self.block.conv.cin, s[1]
            ));
        }
        let h = self.block.forward(g, store, feature)?;
        let y = self.out.forward(g, store, h)?;
        g.resample(y, target)
    }

    pub fn key_prefix(&self) -> String {
        format!("heads.restore.{}.", self.level)
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonHead {
    pub channels: usize,
    pub hidden: usize,
    pub predictor: PredictorKind,
    bn: BatchNorm,
    fc1: Linear,
    pred_bn: BatchNorm,
    fc2: Linear,
}

impl ComparisonHead {
    /// `v = BN(GAP(F))`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feature: NodeId) -> Result<NodeId> {
        let s = g.shape(feature);
        if s[1] != self.channels {
            return shape_err(format!("embedding expects {} channels, got {}", self.channels, s[1]));
        }
        let pooled = g.gap(feature);
        self.bn.forward(g, store, pooled)
    }

    /// `f_P(v) = FC(FC-BN-ReLU(v))`.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: NodeId) -> Result<NodeId> {
        if g.shape(v)[1] != self.channels {
            return shape_err(format!("predictor expects width {}, got {:?}", self.channels, g.shape(v)));
        }
        match self.predictor {
            PredictorKind::Identity => Ok(v),
            PredictorKind::Mlp => {
                let h = self.fc1.forward(g, store, v)?;
                let h = self.pred_bn.forward(g, store, h)?;
                let h = g.relu(h);
                self.fc2.forward(g, store, h)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub restore: Vec<RestorationHead>,
    pub compare: ComparisonHead,
}

impl Heads {
    /// Heads for a pyramid of width `channels` restoring `image_channels`
    /// channel images. The predictor hidden width is `channels / 2`.
    pub fn new(dim: Dimensionality, channels: usize, image_channels: usize, predictor: PredictorKind) -> Self {
        let restore = (1..=LEVELS)
            .map(|i| RestorationHead {
                level: i,
                block: ConvBnRelu::new(&format!("heads.restore.{i}.a"), channels, channels, dim.kernel(3), [1; 3]),
                out: Conv::new(format!("heads.restore.{i}.out"), channels, image_channels, dim.kernel(3), [1; 3], true),
            })
            .collect();
        let hidden = (channels / 2).max(1);
        let compare = ComparisonHead {
            channels,
            hidden,
            predictor,
            bn: BatchNorm::new("heads.compare.bn", channels),
            fc1: Linear::new("heads.compare.pred.fc1", channels, hidden, false),
            pred_bn: BatchNorm::new("heads.compare.pred.bn", hidden),
            fc2: Linear::new("heads.compare.pred.fc2", hidden, channels, true),
        };
        Self { restore, compare }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = seed::rng(seed, Stream::Init, &[1]);
        let mut store = ParamStore::new();
        for h in &self.restore {
            h.block.init(&mut store, &mut rng);
            h.out.init(&mut store, &mut rng);
        }
        let c = &self.compare;
        c.bn.init(&mut store);
        c.fc1.init(&mut store, &mut rng);
        c.pred_bn.init(&mut store);
        c.fc2.init(&mut store, &mut rng);
        store
    }

    /// Restoration head for level `i` in `1..=5`.
    pub fn restoration(&self, i: usize) -> &RestorationHead {
        &self.restore[i - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn heads() -> (Heads, ParamStore<f64>) {
        let h = Heads::new(Dimensionality::D2, 4, 1, PredictorKind::Mlp);
        let s = h.init_params(5);
        (h, s)
    }

    #[test]
    fn restore_outputs_target_resolution() {
        let (h, store) = heads();
        let mut g = Graph::new(true);
        let f = g.input(Tensor::full([2, 4, 1, 14, 14], 0.3));
        let y = h.restoration(1).restore(&mut g, &store, f, [1, 224, 224]).unwrap();
        assert_eq!(g.shape(y), [2, 1, 1, 224, 224]);
        let f5 = g.input(Tensor::full([2, 4, 1, 8, 8], 0.3));
        let y5 = h.restoration(5).restore(&mut g, &store, f5, [1, 8, 8]).unwrap();
        assert_eq!(g.shape(y5), [2, 1, 1, 8, 8]);
        let bad = g.input(Tensor::full([2, 3, 1, 8, 8], 0.3));
        assert!(h.restoration(5).restore(&mut g, &store, bad, [1, 8, 8]).is_err());
    }

    #[test]
    fn siamese_branches_share_restoration_parameters() {
        let (h, store) = heads();
        let mut g = Graph::new(true);
        let a = g.input(Tensor::full([2, 4, 1, 4, 4], 0.1));
        let b = g.input(Tensor::full([2, 4, 1, 4, 4], 0.7));
        let before = g.len();
        h.restoration(3).restore(&mut g, &store, a, [1, 8, 8]).unwrap();
        let mid = g.len();
        h.restoration(3).restore(&mut g, &store, b, [1, 8, 8]).unwrap();
        // second call reuses the five parameter leaves (conv w, bn gamma/beta, out w/b)
        let first = mid - before;
        let second = g.len() - mid;
        assert_eq!(first - second, 5);
    }

    #[test]
    fn embedding_of_constant_map_is_channel_value_before_bn() {
        let (h, store) = heads();
        let mut g = Graph::new(true);
        let data: Vec<f64> = (0..2 * 4 * 9).map(|i| ((i / 9) % 4) as f64 + (i / 36) as f64).collect();
        let f = g.input(Tensor::from_vec([2, 4, 1, 3, 3], data).unwrap());
        let pooled = g.gap(f);
        assert_eq!(g.value(pooled).data(), &[0.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let v = h.compare.embed(&mut g, &store, f).unwrap();
        assert_eq!(g.shape(v), [2, 4, 1, 1, 1]);
    }

    #[test]
    fn embedding_ignores_resolution_given_equal_means() {
        let (h, store) = heads();
        let mut g = Graph::new(true);
        let hi: Vec<f64> = (0..2 * 4 * 16).map(|i| if i % 2 == 0 { (i / 16) as f64 } else { (i / 16) as f64 + 1.0 }).collect();
        let lo: Vec<f64> = (0..2 * 4).map(|i| i as f64 + 0.5).collect();
        let a = g.input(Tensor::from_vec([2, 4, 1, 4, 4], hi).unwrap());
        let b = g.input(Tensor::from_vec([2, 4, 1, 1, 1], lo).unwrap());
        let va = h.compare.embed(&mut g, &store, a).unwrap();
        let vb = h.compare.embed(&mut g, &store, b).unwrap();
        assert_eq!(g.value(va), g.value(vb));
    }

    #[test]
    fn predictor_shapes_and_zero_output() {
        let (h, mut store) = heads();
        let mut g = Graph::new(true);
        let v = g.input(Tensor::from_vec([2, 4, 1, 1, 1], (0..8).map(|i| i as f64).collect()).unwrap());
        let p = h.compare.predict(&mut g, &store, v).unwrap();
        assert_eq!(g.shape(p), [2, 4, 1, 1, 1]);
        for k in ["heads.compare.pred.fc2.weight", "heads.compare.pred.fc2.bias"] {
            store.get_mut(k).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(true);
        let z = g.input(Tensor::zeros([2, 4, 1, 1, 1]));
        let p = h.compare.predict(&mut g, &store, z).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.0));
        assert_eq!(h.compare.hidden, 2);
    }
}
