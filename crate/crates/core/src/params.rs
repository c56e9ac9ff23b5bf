use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::BnObservation;
use crate::tensor::{Scalar, Shape, Tensor};

/// Momentum used when folding batch statistics into running buffers.
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Keys are dotted paths; iteration is key-sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.params.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(key)
    }

    pub fn buffer(&self, key: &str) -> Option<&Tensor<T>> {
        self.buffers.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.params.insert(key.into(), t);
    }

    pub fn insert_buffer(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(key.into(), t);
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every entry whose key starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
            n += 1;
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.buffers.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Folds observed batch statistics into `<key>.running_mean/var`.
    pub fn apply_bn_observations(&mut self, obs: &[BnObservation<T>]) {
        let m = T::of(BN_MOMENTUM);
        for o in obs {
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", o.key)) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&o.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", o.key)) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&o.var_unbiased) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }
}

/// He-normal initialisation with the given fan-in.
pub fn he_normal<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..crate::tensor::numel(&shape))
        .map(|_| T::of(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Uniform `±1/sqrt(fan_in)`, the usual default for affine layers and biases.
pub fn uniform_fan_in<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..crate::tensor::numel(&shape))
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
