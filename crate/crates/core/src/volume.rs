//! Single-sample image and volume buffers plus resampling helpers.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-first `f32` voxel buffer `[channels, d0, d1, d2]`.
///
/// 2D images are stored with `d0 == 1`, rows on `d1` and columns on `d2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * dims.iter().product::<usize>() {
            return shape_err(format!(
                "volume {channels}x{dims:?} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self::zeros(channels, [1, height, width])
    }

    pub fn is_2d(&self) -> bool {
        self.dims[0] == 1
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.dims[0] + i) * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(c, i, j, k)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    /// Copies the half-open region `[origin, origin + size)`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return shape_err(format!(
                    "crop origin {origin:?} size {size:?} outside {:?}",
                    self.dims
                ));
            }
        }
        let mut out = Volume::zeros(self.channels, size);
        for c in 0..self.channels {
            for i in 0..size[0] {
                for j in 0..size[1] {
                    let src = self.index(c, origin[0] + i, origin[1] + j, origin[2]);
                    let dst = out.index(c, i, j, 0);
                    out.data[dst..dst + size[2]].copy_from_slice(&self.data[src..src + size[2]]);
                }
            }
        }
        Ok(out)
    }

    /// Separable linear resampling (half-pixel centres, edge clamped).
    pub fn resize(&self, dims: [usize; 3]) -> Volume {
        if dims == self.dims {
            return self.clone();
        }
        let maps = [
            LinearMap::new(self.dims[0], dims[0]),
            LinearMap::new(self.dims[1], dims[1]),
            LinearMap::new(self.dims[2], dims[2]),
        ];
        let mut out = Volume::zeros(self.channels, dims);
        for c in 0..self.channels {
            resample_plane(self.channel(c), self.dims, &maps, out.channel_mut(c));
        }
        out
    }

    /// Mirrors along one spatial axis.
    pub fn flip(&self, axis: usize) -> Volume {
        let mut out = self.clone();
        let [d0, d1, d2] = self.dims;
        for c in 0..self.channels {
            for i in 0..d0 {
                for j in 0..d1 {
                    for k in 0..d2 {
                        let (si, sj, sk) = match axis {
                            0 => (d0 - 1 - i, j, k),
                            1 => (i, d1 - 1 - j, k),
                            _ => (i, j, d2 - 1 - k),
                        };
                        let dst = out.index(c, i, j, k);
                        out.data[dst] = self.at(c, si, sj, sk);
                    }
                }
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Stacks samples into a `[batch, channels, d0, d1, d2]` tensor.
    pub fn stack<T: Scalar>(items: &[&Volume]) -> Result<Tensor<T>> {
        let first = match items.first() {
            Some(v) => v,
            None => return shape_err("cannot stack an empty batch"),
        };
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for v in items {
            if v.dims != first.dims || v.channels != first.channels {
                return shape_err(format!(
                    "cannot stack {}x{:?} with {}x{:?}",
                    first.channels, first.dims, v.channels, v.dims
                ));
            }
            data.extend(v.data.iter().map(|&x| T::of(x as f64)));
        }
        let [d0, d1, d2] = first.dims;
        Tensor::from_vec([items.len(), first.channels, d0, d1, d2], data)
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Volume {
        let s = t.shape();
        let per = s[1] * s[2] * s[3] * s[4];
        let data = t.data()[n * per..(n + 1) * per]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Volume {
            channels: s[1],
            dims: [s[2], s[3], s[4]],
            data,
        }
    }
}

/// 1D linear interpolation table from `src` samples to `dst` samples.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub src: usize,
    pub dst: usize,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl LinearMap {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        let scale = src as f64 / dst as f64;
        for o in 0..dst {
            if src == dst {
                lo.push(o);
                hi.push(o);
                w_hi.push(0.0);
                continue;
            }
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(w);
        }
        Self { src, dst, lo, hi, w_hi }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }
}

/// Applies three separable linear maps to one contiguous plane.
pub fn resample_plane<T: Scalar>(src: &[T], dims: [usize; 3], maps: &[LinearMap; 3], out: &mut [T]) {
    let [a0, a1, a2] = dims;
    let (b0, b1, b2) = (maps[0].dst, maps[1].dst, maps[2].dst);
    // innermost axis first
    let mut t2 = vec![T::zero(); a0 * a1 * b2];
    for r in 0..a0 * a1 {
        let row = &src[r * a2..(r + 1) * a2];
        for k in 0..b2 {
            let w = T::of(maps[2].w_hi[k]);
            t2[r * b2 + k] = row[maps[2].lo[k]] * (T::one() - w) + row[maps[2].hi[k]] * w;
        }
    }
    let mut t1 = vec![T::zero(); a0 * b1 * b2];
    for i in 0..a0 {
        for j in 0..b1 {
            let w = T::of(maps[1].w_hi[j]);
            let lo = (i * a1 + maps[1].lo[j]) * b2;
            let hi = (i * a1 + maps[1].hi[j]) * b2;
            let dst = (i * b1 + j) * b2;
            for k in 0..b2 {
                t1[dst + k] = t2[lo + k] * (T::one() - w) + t2[hi + k] * w;
            }
        }
    }
    let plane = b1 * b2;
    for i in 0..b0 {
        let w = T::of(maps[0].w_hi[i]);
        let lo = maps[0].lo[i] * plane;
        let hi = maps[0].hi[i] * plane;
        for p in 0..plane {
            out[i * plane + p] = t1[lo + p] * (T::one() - w) + t1[hi + p] * w;
        }
    }
}

/// Adjoint of [`resample_plane`]: scatters `grad_out` back onto the source grid.
pub fn resample_plane_adjoint<T: Scalar>(
    grad_out: &[T],
    dims: [usize; 3],
    maps: &[LinearMap; 3],
    grad_src: &mut [T],
) {
    let [a0, a1, a2] = dims;
    let (b0, b1, b2) = (maps[0].dst, maps[1].dst, maps[2].dst);
    let plane = b1 * b2;
    let mut t1 = vec![T::zero(); a0 * plane];
    for i in 0..b0 {
        let w = T::of(maps[0].w_hi[i]);
        let lo = maps[0].lo[i] * plane;
        let hi = maps[0].hi[i] * plane;
        for p in 0..plane {
            let g = grad_out[i * plane + p];
            t1[lo + p] = t1[lo + p] + g * (T::one() - w);
            t1[hi + p] = t1[hi + p] + g * w;
        }
    }
    let mut t2 = vec![T::zero(); a0 * a1 * b2];
    for i in 0..a0 {
        for j in 0..b1 {
            let w = T::of(maps[1].w_hi[j]);
            let lo = (i * a1 + maps[1].lo[j]) * b2;
            let hi = (i * a1 + maps[1].hi[j]) * b2;
            let src = (i * b1 + j) * b2;
            for k in 0..b2 {
                let g = t1[src + k];
                t2[lo + k] = t2[lo + k] + g * (T::one() - w);
                t2[hi + k] = t2[hi + k] + g * w;
            }
        }
    }
    for r in 0..a0 * a1 {
        for k in 0..b2 {
            let w = T::of(maps[2].w_hi[k]);
            let g = t2[r * b2 + k];
            let lo = r * a2 + maps[2].lo[k];
            let hi = r * a2 + maps[2].hi[k];
            grad_src[lo] = grad_src[lo] + g * (T::one() - w);
            grad_src[hi] = grad_src[hi] + g * w;
        }
    }
}
