//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` walks it in reverse. Nodes whose
//! inputs carry no gradient are never visited, which makes
//! [`Graph::detach`] an exact stop-gradient.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Scalar, Shape, Tensor};
use crate::volume::{resample_plane, resample_plane_adjoint, LinearMap};

pub type NodeId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if stride[a] == 0 || padded < kernel[a] {
                return shape_err(format!(
                    "conv axis {a}: input {} pad {} kernel {} stride {}",
                    input[a], pad[a], kernel[a], stride[a]
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self { kernel, stride, pad, input, output })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// For each kernel offset along one axis, the valid output range and the
    /// matching input start.
    fn axis_ranges(&self, a: usize) -> Vec<(usize, usize, isize)> {
        (0..self.kernel[a])
            .map(|kk| {
                let s = self.stride[a] as isize;
                let off = kk as isize - self.pad[a] as isize;
                // smallest o with o*s + off >= 0, largest with o*s + off < input
                let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
                let hi_excl = {
                    let lim = self.input[a] as isize - off;
                    if lim <= 0 {
                        0
                    } else {
                        ((lim + s - 1) / s).min(self.output[a] as isize)
                    }
                };
                (lo as usize, hi_excl.max(lo) as usize, off)
            })
            .collect()
    }
}

fn im2col<T: Scalar>(x: &[T], cin: usize, g: &ConvGeom, cols: &mut [T]) {
    let [i0, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let p = o0 * o1 * o2;
    let r0 = g.axis_ranges(0);
    let r1 = g.axis_ranges(1);
    let r2 = g.axis_ranges(2);
    let taps = g.taps();
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..cin {
        let plane = &x[c * i0 * i1 * i2..(c + 1) * i0 * i1 * i2];
        for (a, &(lo0, hi0, off0)) in r0.iter().enumerate() {
            for (b, &(lo1, hi1, off1)) in r1.iter().enumerate() {
                for (d, &(lo2, hi2, off2)) in r2.iter().enumerate() {
                    let row = c * taps + (a * g.kernel[1] + b) * g.kernel[2] + d;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for u in lo0..hi0 {
                        let xi = (u * g.stride[0]) as isize + off0;
                        for v in lo1..hi1 {
                            let xj = (v * g.stride[1]) as isize + off1;
                            let src_row = (xi as usize * i1 + xj as usize) * i2;
                            let dst_row = (u * o1 + v) * o2;
                            if g.stride[2] == 1 {
                                let s0 = (src_row as isize + lo2 as isize + off2) as usize;
                                let n = hi2 - lo2;
                                dst[dst_row + lo2..dst_row + hi2].copy_from_slice(&plane[s0..s0 + n]);
                            } else {
                                for w in lo2..hi2 {
                                    let xk = (w * g.stride[2]) as isize + off2;
                                    dst[dst_row + w] = plane[src_row + xk as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, g: &ConvGeom, dx: &mut [T]) {
    let [i0, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let p = o0 * o1 * o2;
    let r0 = g.axis_ranges(0);
    let r1 = g.axis_ranges(1);
    let r2 = g.axis_ranges(2);
    let taps = g.taps();
    for c in 0..cin {
        let plane = &mut dx[c * i0 * i1 * i2..(c + 1) * i0 * i1 * i2];
        for (a, &(lo0, hi0, off0)) in r0.iter().enumerate() {
            for (b, &(lo1, hi1, off1)) in r1.iter().enumerate() {
                for (d, &(lo2, hi2, off2)) in r2.iter().enumerate() {
                    let row = c * taps + (a * g.kernel[1] + b) * g.kernel[2] + d;
                    let src = &cols[row * p..(row + 1) * p];
                    for u in lo0..hi0 {
                        let xi = (u * g.stride[0]) as isize + off0;
                        for v in lo1..hi1 {
                            let xj = (v * g.stride[1]) as isize + off1;
                            let dst_row = (xi as usize * i1 + xj as usize) * i2;
                            let src_row = (u * o1 + v) * o2;
                            for w in lo2..hi2 {
                                let xk = ((w * g.stride[2]) as isize + off2) as usize;
                                plane[dst_row + xk] = plane[dst_row + xk] + src[src_row + w];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Resample { x: NodeId, maps: Box<[LinearMap; 3]> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Gap { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    SliceBatch { x: NodeId, start: usize },
    Mse { a: NodeId, b: NodeId },
    CosineMean { a: NodeId, b: NodeId, norms: Vec<(T, T)> },
    WeightedSum { terms: Vec<(NodeId, T)> },
    BceWithLogits { x: NodeId, target: Tensor<T> },
    SoftDice { x: NodeId, target: Tensor<T>, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into running buffers after the optimizer step.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub key: String,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    frozen: Vec<String>,
    /// Training mode: batch norms use batch statistics.
    pub train: bool,
    pub bn_observations: Vec<BnObservation<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, key: &str) -> Option<&Tensor<T>> {
        self.params.get(key).and_then(|&id| self.of(id))
    }

    /// Gradient for every parameter that took part in the loss.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(k, &id)| self.of(id).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
            train,
            bn_observations: Vec::new(),
        }
    }

    /// Parameters under any of these key prefixes are treated as constants,
    /// and their batch norms use running statistics.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn is_frozen(&self, key: &str) -> bool {
        self.frozen.iter().any(|p| key.starts_with(p.as_str()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The branch every ReLU element and max-pool window took. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.nodes[*x].value.data().iter().map(|&v| (v > T::zero()) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated requests share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, key: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(key) {
            return Ok(id);
        }
        let value = store
            .get(key)
            .ok_or_else(|| Error::Shape(format!("missing parameter {key}")))?
            .clone();
        let trainable = !self.is_frozen(key);
        let id = self.push(value, Op::Leaf, trainable);
        self.params.insert(key.to_string(), id);
        Ok(id)
    }

    /// Stop-gradient: same value, no path back to `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.input(v)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[1] != xs[1] {
            return shape_err(format!("conv weight {ws:?} expects {} input channels, got {xs:?}", ws[1]));
        }
        if let Some(b) = b {
            if numel(&self.shape(b)) != ws[0] {
                return shape_err("conv bias length differs from output channels");
            }
        }
        let geom = ConvGeom::new([xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], stride, pad)?;
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let k = cin * geom.taps();
        let p: usize = geom.output.iter().product();
        let in_len = cin * geom.input.iter().product::<usize>();
        let mut out = Tensor::zeros([n, cout, geom.output[0], geom.output[1], geom.output[2]]);
        let wv = self.nodes[w].value.data();
        let xv = self.nodes[x].value.data();
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for s in 0..n {
            let xin = &xv[s * in_len..(s + 1) * in_len];
            let src: &[T] = if geom.is_pointwise() {
                xin
            } else {
                im2col(xin, cin, &geom, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = b {
                let bv = self.nodes[b].value.data();
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, k, p, T::one(), wv, k as isize, 1, src, p as isize, 1, beta, dst, p as isize, 1);
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    /// Batch normalisation over batch and spatial axes. With `running`
    /// given (evaluation mode) those statistics are used instead; in
    /// training mode the observed batch statistics are recorded under `key`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
        key: &str,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let (n, c, sp) = (xs[0], xs[1], xs[2] * xs[3] * xs[4]);
        if numel(&self.shape(gamma)) != c || numel(&self.shape(beta)) != c {
            return shape_err(format!("batch norm over {c} channels got mismatched affine params"));
        }
        let m = n * sp;
        let eps = T::of(BN_EPS);
        let xv = self.nodes[x].value.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let train = running.is_none();
        match running {
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
            None => {
                if m == 0 {
                    return shape_err("batch norm over empty batch");
                }
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * sp;
                        s += xv[off..off + sp].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * sp;
                        q += xv[off..off + sp].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(q / m as f64);
                }
                let unbiased = if m > 1 {
                    var.iter().map(|&v| v * T::of(m as f64 / (m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                self.bn_observations.push(BnObservation {
                    key: key.to_string(),
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                });
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(xs);
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    od[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("channel concat {sa:?} with {sb:?}"));
        }
        let sp = sa[2] * sa[3] * sa[4];
        let mut shape = sa;
        shape[1] = sa[1] + sb[1];
        let mut data = Vec::with_capacity(numel(&shape));
        let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        for n in 0..sa[0] {
            data.extend_from_slice(&av[n * sa[1] * sp..(n + 1) * sa[1] * sp]);
            data.extend_from_slice(&bv[n * sb[1] * sp..(n + 1) * sb[1] * sp]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Concat { a, b }, rg))
    }

    /// Parameter-free linear interpolation to `dims`.
    pub fn resample(&mut self, x: NodeId, dims: [usize; 3]) -> Result<NodeId> {
        let xs = self.shape(x);
        if dims.contains(&0) {
            return shape_err(format!("resample to {dims:?}"));
        }
        let src = [xs[2], xs[3], xs[4]];
        if src == dims {
            return Ok(x);
        }
        let maps = Box::new([
            LinearMap::new(src[0], dims[0]),
            LinearMap::new(src[1], dims[1]),
            LinearMap::new(src[2], dims[2]),
        ]);
        let mut out = Tensor::zeros([xs[0], xs[1], dims[0], dims[1], dims[2]]);
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let inp = self.nodes[x].value.plane(n, c);
                resample_plane(inp, src, &maps, out.plane_mut(n, c));
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Resample { x, maps }, rg))
    }

    pub fn max_pool(&mut self, x: NodeId, geom: PoolGeom) -> Result<NodeId> {
        let xs = self.shape(x);
        let cg = ConvGeom::new([xs[2], xs[3], xs[4]], geom.kernel, geom.stride, geom.pad)?;
        let [o0, o1, o2] = cg.output;
        let [i0, i1, i2] = cg.input;
        let mut out = Tensor::zeros([xs[0], xs[1], o0, o1, o2]);
        let mut argmax = vec![0usize; numel(&out.shape())];
        let xv = self.nodes[x].value.data();
        let isp = i0 * i1 * i2;
        let osp = o0 * o1 * o2;
        for plane in 0..xs[0] * xs[1] {
            let base = plane * isp;
            for u in 0..o0 {
                for v in 0..o1 {
                    for w in 0..o2 {
                        let mut best = T::neg_infinity();
                        let mut arg = usize::MAX;
                        for a in 0..geom.kernel[0] {
                            let xi = (u * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                            if xi < 0 || xi >= i0 as isize {
                                continue;
                            }
                            for b in 0..geom.kernel[1] {
                                let xj = (v * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                                if xj < 0 || xj >= i1 as isize {
                                    continue;
                                }
                                for d in 0..geom.kernel[2] {
                                    let xk = (w * geom.stride[2] + d) as isize - geom.pad[2] as isize;
                                    if xk < 0 || xk >= i2 as isize {
                                        continue;
                                    }
                                    let idx = base + (xi as usize * i1 + xj as usize) * i2 + xk as usize;
                                    if arg == usize::MAX || xv[idx] > best {
                                        best = xv[idx];
                                        arg = idx;
                                    }
                                }
                            }
                        }
                        let o = plane * osp + (u * o1 + v) * o2 + w;
                        out.data_mut()[o] = best;
                        argmax[o] = arg;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Global average pooling to `[batch, channels, 1, 1, 1]`.
    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let sp = xs[2] * xs[3] * xs[4];
        let xv = self.nodes[x].value.data();
        let data = (0..xs[0] * xs[1])
            .map(|p| {
                let s: f64 = xv[p * sp..(p + 1) * sp].iter().map(|v| v.as_f64()).sum();
                T::of(s / sp as f64)
            })
            .collect();
        let out = Tensor::from_vec([xs[0], xs[1], 1, 1, 1], data).expect("gap shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::Gap { x }, rg)
    }

    /// Affine map on `[batch, in]` rows with weight `[out, in, 1, 1, 1]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[2..] != [1, 1, 1] || ws[1] != xs[1] {
            return shape_err(format!("linear {ws:?} applied to {xs:?}"));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros([n, cout, 1, 1, 1]);
        if let Some(b) = b {
            let bv = self.nodes[b].value.data().to_vec();
            for row in out.data_mut().chunks_mut(cout) {
                row.copy_from_slice(&bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        // out[n, cout] = x[n, cin] * w^T
        T::gemm(
            n,
            cin,
            cout,
            T::one(),
            self.nodes[x].value.data(),
            cin as isize,
            1,
            self.nodes[w].value.data(),
            1,
            cin as isize,
            beta,
            out.data_mut(),
            cout as isize,
            1,
        );
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn slice_batch(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = self.nodes[x].value.slice_batch(start, len)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SliceBatch { x, start }, rg))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mse between {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        let out = Tensor::scalar(T::of(s / av.len() as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mse { a, b }, rg))
    }

    /// Row-wise cosine similarity of two `[batch, width]` inputs, averaged
    /// over the batch.
    pub fn cosine_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa[2..] != [1, 1, 1] {
            return shape_err(format!("cosine between {sa:?} and {sb:?}"));
        }
        let (n, c) = (sa[0], sa[1]);
        let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let mut norms = Vec::with_capacity(n);
        let mut total = 0.0;
        for r in 0..n {
            let (ra, rb) = (&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c]);
            let na = ra.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            for norm in [na, nb] {
                if !(norm >= DEGENERATE_NORM) {
                    return Err(Error::DegenerateVector { norm });
                }
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            total += dot / (na * nb);
            norms.push((T::of(na), T::of(nb)));
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::CosineMean { a, b, norms }, rg))
    }

    /// `sum(coeff * term)` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, c) in terms {
            if numel(&self.shape(id)) != 1 {
                return shape_err("weighted_sum expects scalar terms");
            }
            s += c * self.nodes[id].value.item().as_f64();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&ids);
        let terms = terms.iter().map(|&(id, c)| (id, T::of(c))).collect();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::WeightedSum { terms }, rg))
    }

    /// Mean binary cross-entropy with logits against a constant target.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != target.shape() {
            return shape_err(format!("bce logits {:?} vs target {:?}", self.shape(x), target.shape()));
        }
        let xv = self.nodes[x].value.data();
        let s: f64 = xv
            .iter()
            .zip(target.data())
            .map(|(z, y)| {
                let (z, y) = (z.as_f64(), y.as_f64());
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor::scalar(T::of(s / xv.len() as f64));
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::BceWithLogits { x, target }, rg))
    }

    /// `1 - mean soft Dice` over every `(sample, class)` plane, with
    /// sigmoid probabilities and additive smoothing `eps`.
    pub fn soft_dice_loss(&mut self, x: NodeId, target: Tensor<T>, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs != target.shape() {
            return shape_err(format!("dice logits {xs:?} vs mask {:?}", target.shape()));
        }
        let sp = xs[2] * xs[3] * xs[4];
        let planes = xs[0] * xs[1];
        let xv = self.nodes[x].value.data();
        let mut total = 0.0;
        for p in 0..planes {
            let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
            for i in p * sp..(p + 1) * sp {
                let prob = sigmoid(xv[i].as_f64());
                let t = target.data()[i].as_f64();
                inter += prob * t;
                ps += prob;
                ts += t;
            }
            total += (2.0 * inter + eps) / (ps + ts + eps);
        }
        let out = Tensor::scalar(T::of(1.0 - total / planes as f64));
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SoftDice { x, target, eps: T::of(eps) }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if numel(&self.shape(loss)) != 1 {
            return shape_err("backward from a non-scalar node");
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, cout) = (xs[0], xs[1], ws[0]);
                let k = cin * geom.taps();
                let p: usize = geom.output.iter().product();
                let in_len = cin * geom.input.iter().product::<usize>();
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let need_dx = self.requires_grad(*x);
                let need_dw = self.requires_grad(*w);
                let mut dw = Tensor::zeros(ws);
                let mut dx = Tensor::zeros(xs);
                let pointwise = geom.is_pointwise();
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
                let mut dcols = vec![T::zero(); if pointwise { 0 } else { k * p }];
                for s in 0..n {
                    let gs = &go[s * cout * p..(s + 1) * cout * p];
                    if need_dw {
                        let xin = &xv[s * in_len..(s + 1) * in_len];
                        let src: &[T] = if pointwise {
                            xin
                        } else {
                            im2col(xin, cin, geom, &mut cols);
                            &cols
                        };
                        // dW[cout, k] += g[cout, p] * cols^T[p, k]
                        T::gemm(cout, p, k, T::one(), gs, p as isize, 1, src, 1, p as isize, T::one(), dw.data_mut(), k as isize, 1);
                    }
                    if need_dx {
                        let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                        if pointwise {
                            T::gemm(k, cout, p, T::one(), wv, 1, k as isize, gs, p as isize, 1, T::one(), dxs, p as isize, 1);
                        } else {
                            T::gemm(k, cout, p, T::one(), wv, 1, k as isize, gs, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                            col2im(&dcols, cin, geom, dxs);
                        }
                    }
                }
                if need_dx {
                    self.accumulate(grads, *x, dx);
                }
                if need_dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); cout];
                        for s in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let off = (s * cout + o) * p;
                                *d = *d + go[off..off + p].iter().fold(T::zero(), |a, &v| a + v);
                            }
                        }
                        let shape = self.shape(*b);
                        self.accumulate(grads, *b, Tensor::from_vec(shape, db).expect("bias grad"));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (n, c, sp) = (xs[0], xs[1], xs[2] * xs[3] * xs[4]);
                let m = T::of((n * sp) as f64);
                let gv = self.nodes[*gamma].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * sp;
                        for i in off..off + sp {
                            dgamma[ch] = dgamma[ch] + go[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + go[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xs);
                    let dxd = dx.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * sp;
                            for i in off..off + sp {
                                dxd[i] = if *train {
                                    // dxhat = g * gamma, with the two batch-mean corrections
                                    gv[ch] * inv_std[ch] / m * (m * go[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gv[ch] * inv_std[ch] * go[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let gshape = self.shape(*gamma);
                self.accumulate(grads, *gamma, Tensor::from_vec(gshape, dgamma).expect("gamma grad"));
                let bshape = self.shape(*beta);
                self.accumulate(grads, *beta, Tensor::from_vec(bshape, dbeta).expect("beta grad"));
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let mut dx = gout.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let sp = sa[2] * sa[3] * sa[4];
                let (ca, cb) = (sa[1] * sp, sb[1] * sp);
                let mut da = Vec::with_capacity(numel(&sa));
                let mut db = Vec::with_capacity(numel(&sb));
                for n in 0..sa[0] {
                    let off = n * (ca + cb);
                    da.extend_from_slice(&go[off..off + ca]);
                    db.extend_from_slice(&go[off + ca..off + ca + cb]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(sa, da).expect("concat grad"));
                self.accumulate(grads, *b, Tensor::from_vec(sb, db).expect("concat grad"));
            }
            Op::Resample { x, maps } => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs[0] {
                    for c in 0..xs[1] {
                        resample_plane_adjoint(gout.plane(n, c), [xs[2], xs[3], xs[4]], maps, dx.plane_mut(n, c));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let dxd = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    dxd[src] = dxd[src] + go[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gap { x } => {
                let xs = self.shape(*x);
                let sp = xs[2] * xs[3] * xs[4];
                let scale = T::of(1.0 / sp as f64);
                let mut dx = Tensor::zeros(xs);
                for (p, chunk) in dx.data_mut().chunks_mut(sp).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = go[p] * scale);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, cout) = (xs[0], xs[1], ws[0]);
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xs);
                    T::gemm(n, cout, cin, T::one(), go, cout as isize, 1, self.nodes[*w].value.data(), cin as isize, 1, T::zero(), dx.data_mut(), cin as isize, 1);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(ws);
                    T::gemm(cout, n, cin, T::one(), go, 1, cout as isize, self.nodes[*x].value.data(), cin as isize, 1, T::zero(), dw.data_mut(), cin as isize, 1);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); cout];
                    for row in go.chunks(cout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    let shape = self.shape(*b);
                    self.accumulate(grads, *b, Tensor::from_vec(shape, db).expect("bias grad"));
                }
            }
            Op::SliceBatch { x, start } => {
                let xs = self.shape(*x);
                let per = numel(&xs) / xs[0];
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * per..start * per + go.len()].copy_from_slice(go);
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let scale = go[0] * T::of(2.0 / av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                let shape = self.shape(*a);
                if self.requires_grad(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(shape, db).expect("mse grad"));
                }
                self.accumulate(grads, *a, Tensor::from_vec(shape, da).expect("mse grad"));
            }
            Op::CosineMean { a, b, norms } => {
                let sa = self.shape(*a);
                let (n, c) = (sa[0], sa[1]);
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let mut da = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                let scale = go[0] / T::of(n as f64);
                for r in 0..n {
                    let (na, nb) = norms[r];
                    let ra = &av[r * c..(r + 1) * c];
                    let rb = &bv[r * c..(r + 1) * c];
                    let dot = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
                    let cos = dot / (na * nb);
                    for i in 0..c {
                        // d cos / d a = b/(|a||b|) - cos * a/|a|^2
                        da[r * c + i] = scale * (rb[i] / (na * nb) - cos * ra[i] / (na * na));
                        db[r * c + i] = scale * (ra[i] / (na * nb) - cos * rb[i] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(sa, da).expect("cos grad"));
                self.accumulate(grads, *b, Tensor::from_vec(sa, db).expect("cos grad"));
            }
            Op::WeightedSum { terms } => {
                for &(id, c) in terms {
                    self.accumulate(grads, id, Tensor::scalar(go[0] * c));
                }
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.nodes[*x].value.data();
                let scale = go[0].as_f64() / xv.len() as f64;
                let dx = xv
                    .iter()
                    .zip(target.data())
                    .map(|(z, y)| T::of(scale * (sigmoid(z.as_f64()) - y.as_f64())))
                    .collect();
                let shape = self.shape(*x);
                self.accumulate(grads, *x, Tensor::from_vec(shape, dx).expect("bce grad"));
            }
            Op::SoftDice { x, target, eps } => {
                let xs = self.shape(*x);
                let sp = xs[2] * xs[3] * xs[4];
                let planes = xs[0] * xs[1];
                let eps = eps.as_f64();
                let xv = self.nodes[*x].value.data();
                let mut dx = vec![T::zero(); xv.len()];
                let scale = -go[0].as_f64() / planes as f64;
                for p in 0..planes {
                    let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
                    for i in p * sp..(p + 1) * sp {
                        let prob = sigmoid(xv[i].as_f64());
                        let t = target.data()[i].as_f64();
                        inter += prob * t;
                        ps += prob;
                        ts += t;
                    }
                    let num = 2.0 * inter + eps;
                    let den = ps + ts + eps;
                    for i in p * sp..(p + 1) * sp {
                        let prob = sigmoid(xv[i].as_f64());
                        let t = target.data()[i].as_f64();
                        let ddice_dp = (2.0 * t * den - num) / (den * den);
                        dx[i] = T::of(scale * ddice_dp * prob * (1.0 - prob));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx).expect("dice grad"));
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..numel(&shape)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Central differences of `f` with respect to every element of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor<f64>],
        which: usize,
        f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) -> Vec<f64> {
        let h = 1e-6;
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new(true);
            let ids: Vec<_> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &ids);
            g.value(out).item()
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check(inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
        let mut g = Graph::new(true);
        let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &ids);
        let grads = g.backward(out).unwrap();
        for (w, &id) in ids.iter().enumerate() {
            let num = numeric_grad(&inputs, w, f);
            let ana = grads.of(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; num.len()]);
            for (i, (a, n)) in ana.iter().zip(&num).enumerate() {
                let tol = 1e-6 * (1.0 + n.abs());
                assert!((a - n).abs() < tol, "input {w} elem {i}: analytic {a} numeric {n}");
            }
        }
    }

    /// Projects a node onto a fixed random direction so the check runs on a scalar.
    fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = rand_tensor(g.shape(x), &mut rng);
        let t = g.input(probe);
        let sq = g.mse(x, t).unwrap();
        sq
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([2, 3, 4, 5, 6], &mut rng);
        let w = rand_tensor([2, 3, 3, 3, 3], &mut rng);
        let b = rand_tensor([2, 1, 1, 1, 1], &mut rng);
        check(vec![x, w, b], &|g, ids| {
            let y = g.conv(ids[0], ids[1], Some(ids[2]), [2, 1, 2], [1, 1, 1]).unwrap();
            project(g, y, 9)
        });
    }

    #[test]
    fn pointwise_and_2d_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor([2, 3, 1, 5, 6], &mut rng);
        let w1 = rand_tensor([4, 3, 1, 1, 1], &mut rng);
        let w2 = rand_tensor([2, 4, 1, 3, 3], &mut rng);
        check(vec![x, w1, w2], &|g, ids| {
            let y = g.conv(ids[0], ids[1], None, [1, 1, 1], [0, 0, 0]).unwrap();
            let z = g.conv(y, ids[2], None, [1, 2, 2], [0, 1, 1]).unwrap();
            project(g, z, 3)
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([1, 2, 5, 4, 3], &mut rng);
        let w = rand_tensor([3, 2, 3, 3, 3], &mut rng);
        let mut g = Graph::new(false);
        let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv(xi, wi, None, [2, 2, 1], [1, 1, 1]).unwrap();
        let out = g.value(y);
        let [_, _, o0, o1, o2] = out.shape();
        for oc in 0..3 {
            for u in 0..o0 {
                for v in 0..o1 {
                    for q in 0..o2 {
                        let mut s = 0.0;
                        for ic in 0..2 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for c in 0..3 {
                                        let (i, j, k) = (
                                            (u * 2 + a) as isize - 1,
                                            (v * 2 + b) as isize - 1,
                                            (q + c) as isize - 1,
                                        );
                                        if i < 0 || j < 0 || k < 0 || i >= 5 || j >= 4 || k >= 3 {
                                            continue;
                                        }
                                        let xv = x.data()[((ic * 5 + i as usize) * 4 + j as usize) * 3 + k as usize];
                                        let wv = w.data()[(((oc * 2 + ic) * 3 + a) * 3 + b) * 3 + c];
                                        s += xv * wv;
                                    }
                                }
                            }
                        }
                        let got = out.data()[((oc * o0 + u) * o1 + v) * o2 + q];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor([3, 2, 2, 2, 1], &mut rng);
        let gm = rand_tensor([2, 1, 1, 1, 1], &mut rng);
        let bt = rand_tensor([2, 1, 1, 1, 1], &mut rng);
        check(vec![x.clone(), gm.clone(), bt.clone()], &|g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], None, "bn").unwrap();
            project(g, y, 5)
        });
        check(vec![x, gm, bt], &|g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], Some((&[0.1, -0.2], &[1.5, 0.7])), "bn").unwrap();
            project(g, y, 6)
        });
    }

    #[test]
    fn pooling_resample_gap_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor([2, 2, 4, 5, 3], &mut rng);
        let w = rand_tensor([3, 2, 1, 1, 1], &mut rng);
        let b = rand_tensor([3, 1, 1, 1, 1], &mut rng);
        check(vec![x, w, b], &|g, ids| {
            let p = g
                .max_pool(ids[0], PoolGeom { kernel: [3, 3, 1], stride: [2, 2, 1], pad: [1, 1, 0] })
                .unwrap();
            let r = g.resample(p, [5, 7, 2]).unwrap();
            let a = g.relu(r);
            let v = g.gap(a);
            let l = g.linear(v, ids[1], Some(ids[2])).unwrap();
            project(g, l, 7)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor([3, 4, 1, 1, 1], &mut rng);
        let b = rand_tensor([3, 4, 1, 1, 1], &mut rng);
        let target = Tensor::from_vec([3, 4, 1, 1, 1], (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
        check(vec![a.clone(), b.clone()], &|g, ids| {
            let c = g.cosine_mean(ids[0], ids[1]).unwrap();
            let m = g.mse(ids[0], ids[1]).unwrap();
            let s = g.slice_batch(ids[0], 1, 2).unwrap();
            let t = g.slice_batch(ids[1], 0, 2).unwrap();
            let c2 = g.cosine_mean(s, t).unwrap();
            let bce = g.bce_with_logits(ids[0], target.clone()).unwrap();
            let dice = g.soft_dice_loss(ids[1], target.clone(), 1e-5).unwrap();
            let cat = g.concat(ids[0], ids[1]).unwrap();
            let pc = project(g, cat, 8);
            g.weighted_sum(&[(c, -0.5), (m, 2.0), (c2, 1.5), (bce, 1.0), (dice, 0.7), (pc, 1.0)]).unwrap()
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.variable(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = g.variable(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap());
        let xd = g.detach(x);
        let c = g.cosine_mean(xd, y).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.of(x).is_none());
        assert!(grads.of(y).is_some());
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.cosine_mean(x, y), Err(Error::DegenerateVector { .. })));
    }
}
