//! Parameter layouts and forward rules for the building blocks shared by
//! the backbone and the heads. Layers are plain descriptors; tensors live in
//! a [`ParamStore`] under `<key>.weight`, `<key>.bias`, and so on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, PoolGeom};
use crate::error::Result;
use crate::params::{he_normal, uniform_fan_in, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dimensionality {
    /// Isotropic kernel, with the unused leading axis collapsed in 2D.
    pub fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Dimensionality::D2 => [1, k, k],
            Dimensionality::D3 => [k, k, k],
        }
    }
}

/// Stride along one axis, reduced to 1 when the axis is already a single
/// voxel so downsampling never collapses an axis below one.
fn clamp_stride(dim: usize, stride: usize) -> usize {
    if dim <= 1 {
        1
    } else {
        stride
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub key: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub bias: bool,
}

impl Conv {
    pub fn new(key: impl Into<String>, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], bias: bool) -> Self {
        Self { key: key.into(), cin, cout, kernel, stride, bias }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let [k0, k1, k2] = self.kernel;
        let fan_in = self.cin * k0 * k1 * k2;
        store.insert(format!("{}.weight", self.key), he_normal([self.cout, self.cin, k0, k1, k2], fan_in, rng));
        if self.bias {
            store.insert(format!("{}.bias", self.key), Tensor::zeros([self.cout, 1, 1, 1, 1]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.weight", self.key))?;
        let b = if self.bias {
            Some(g.param(store, &format!("{}.bias", self.key))?)
        } else {
            None
        };
        let s = g.shape(x);
        let dims = [s[2], s[3], s[4]];
        let mut stride = [1; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            stride[a] = clamp_stride(dims[a], self.stride[a]);
            pad[a] = self.kernel[a] / 2;
        }
        g.conv(x, w, b, stride, pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub key: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(key: impl Into<String>, channels: usize) -> Self {
        Self { key: key.into(), channels }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let shape = [self.channels, 1, 1, 1, 1];
        store.insert(format!("{}.weight", self.key), Tensor::full(shape, T::one()));
        store.insert(format!("{}.bias", self.key), Tensor::zeros(shape));
        store.insert_buffer(format!("{}.running_mean", self.key), Tensor::zeros(shape));
        store.insert_buffer(format!("{}.running_var", self.key), Tensor::full(shape, T::one()));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, &format!("{}.weight", self.key))?;
        let beta = g.param(store, &format!("{}.bias", self.key))?;
        if g.train && !g.is_frozen(&self.key) {
            g.batch_norm(x, gamma, beta, None, &self.key)
        } else {
            let missing = || crate::Error::Shape(format!("missing running stats for {}", self.key));
            let rm = store.buffer(&format!("{}.running_mean", self.key)).ok_or_else(missing)?;
            let rv = store.buffer(&format!("{}.running_var", self.key)).ok_or_else(missing)?;
            g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), &self.key)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub key: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(key: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Self { key: key.into(), cin, cout, bias }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        store.insert(format!("{}.weight", self.key), uniform_fan_in([self.cout, self.cin, 1, 1, 1], self.cin, rng));
        if self.bias {
            store.insert(format!("{}.bias", self.key), uniform_fan_in([self.cout, 1, 1, 1, 1], self.cin, rng));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.weight", self.key))?;
        let b = if self.bias {
            Some(g.param(store, &format!("{}.bias", self.key))?)
        } else {
            None
        };
        g.linear(x, w, b)
    }
}

/// Conv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(key: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            conv: Conv::new(format!("{key}.conv"), cin, cout, kernel, stride, false),
            bn: BatchNorm::new(format!("{key}.bn"), cout),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Max pooling whose window shrinks to one voxel on axes that are too
/// short for it.
pub fn clamped_max_pool<T: Scalar>(g: &mut Graph<T>, x: NodeId, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
    let s = g.shape(x);
    let dims = [s[2], s[3], s[4]];
    let mut geom = PoolGeom { kernel, stride, pad };
    for a in 0..3 {
        if dims[a] + 2 * pad[a] < kernel[a] || dims[a] <= 1 {
            geom.kernel[a] = 1;
            geom.stride[a] = 1;
            geom.pad[a] = 0;
        }
    }
    g.max_pool(x, geom)
}
