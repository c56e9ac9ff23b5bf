//! Non-skip U-Net backbone producing a five-level feature pyramid.
//!
//! The encoder downsamples five times (rates 2, 4, 8, 16, 32). The decoder
//! starts from the rate-32 bottleneck `F0` and, at each level, interpolates
//! up to the matching encoder resolution and applies two Conv-BN-ReLU
//! blocks, giving `F1..F5` at rates 16, 8, 4, 2 and 1. Skip connections are
//! off by default and exist only for the ablation.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::layers::{clamped_max_pool, BatchNorm, Conv, ConvBnRelu, Dimensionality};
use crate::params::ParamStore;
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dimensionality: Dimensionality,
    pub in_channels: usize,
    /// Width `C` shared by every decoder level.
    pub decoder_channels: usize,
    pub encoder_width_multiplier: f64,
    /// Residual blocks per stage of the 2D encoder.
    pub blocks_per_stage: usize,
    pub use_skip_connections: bool,
    /// Overrides the encoder stage widths when non-empty (5 entries).
    pub encoder_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dimensionality: Dimensionality::D3,
            in_channels: 1,
            decoder_channels: 64,
            encoder_width_multiplier: 1.0,
            blocks_per_stage: 2,
            use_skip_connections: false,
            encoder_widths: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_channels < 1 {
            return Err(Error::Config("decoder_channels must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if !(self.encoder_width_multiplier > 0.0) {
            return Err(Error::Config("encoder_width_multiplier must be positive".into()));
        }
        if !self.encoder_widths.is_empty() && self.encoder_widths.len() != LEVELS {
            return Err(Error::Config(format!("encoder_widths needs {LEVELS} entries")));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.dimensionality == Dimensionality::D2 && self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        Ok(())
    }

    /// Output widths of the five encoder stages.
    pub fn stage_widths(&self) -> [usize; LEVELS] {
        if self.encoder_widths.len() == LEVELS {
            let mut w = [0; LEVELS];
            w.copy_from_slice(&self.encoder_widths);
            return w;
        }
        // ResNet-18 stem/layer widths in 2D, 3D U-Net doubling from 32 in 3D
        let base: [usize; LEVELS] = match self.dimensionality {
            Dimensionality::D2 => [64, 64, 128, 256, 512],
            Dimensionality::D3 => [32, 64, 128, 256, 512],
        };
        base.map(|b| ((b as f64 * self.encoder_width_multiplier).round() as usize).max(1))
    }

    /// Input channel count of each decoder level's first convolution.
    pub fn decoder_in_channels(&self) -> [usize; LEVELS] {
        let w = self.stage_widths();
        let c = self.decoder_channels;
        let mut out = [c; LEVELS];
        out[0] = w[4];
        if self.use_skip_connections {
            // level i (1-based) concatenates encoder stage 4 - i (rate 2^(5-i))
            for (i, slot) in out.iter_mut().enumerate().take(4) {
                *slot += w[3 - i];
            }
        }
        out
    }
}

/// Spatial dims of every encoder stage and decoder level for an input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PyramidShapes {
    /// Encoder stage outputs at rates 2, 4, 8, 16, 32.
    pub encoder: [[usize; 3]; LEVELS],
    /// `F1..F5`.
    pub levels: [[usize; 3]; LEVELS],
    pub bottleneck: [usize; 3],
}

fn conv_out(dim: usize, k: usize, s: usize) -> usize {
    let s = if dim <= 1 { 1 } else { s };
    (dim + 2 * (k / 2) - k) / s + 1
}

fn pool_out(dim: usize, k: usize, s: usize, p: usize) -> usize {
    if dim <= 1 || dim + 2 * p < k {
        dim
    } else {
        (dim + 2 * p - k) / s + 1
    }
}

/// Pure shape trace of the forward pass.
pub fn trace_shapes(dim: Dimensionality, input: [usize; 3]) -> Result<PyramidShapes> {
    if input.contains(&0) {
        return shape_err(format!("non-positive input dims {input:?}"));
    }
    if dim == Dimensionality::D2 && input[0] != 1 {
        return shape_err(format!("2D input must have a unit leading axis, got {input:?}"));
    }
    let active = |a: usize| dim == Dimensionality::D3 || a > 0;
    let mut enc = [[0; 3]; LEVELS];
    let mut cur = input;
    for (stage, slot) in enc.iter_mut().enumerate() {
        for a in 0..3 {
            if !active(a) {
                continue;
            }
            cur[a] = match (dim, stage) {
                (Dimensionality::D2, 0) => conv_out(cur[a], 7, 2),
                (Dimensionality::D2, 1) => pool_out(cur[a], 3, 2, 1),
                (Dimensionality::D2, _) => conv_out(cur[a], 3, 2),
                (Dimensionality::D3, 0) => conv_out(cur[a], 3, 2),
                (Dimensionality::D3, _) => pool_out(cur[a], 2, 2, 0),
            };
        }
        *slot = cur;
    }
    let mut levels = [[0; 3]; LEVELS];
    for (i, slot) in levels.iter_mut().enumerate() {
        *slot = if i < 4 { enc[3 - i] } else { input };
    }
    Ok(PyramidShapes { encoder: enc, levels, bottleneck: enc[4] })
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBnRelu,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(key: &str, cin: usize, cout: usize, stride: usize, dim: Dimensionality) -> Self {
        let s = match dim {
            Dimensionality::D2 => [1, stride, stride],
            Dimensionality::D3 => [stride; 3],
        };
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(format!("{key}.down.conv"), cin, cout, [1, 1, 1], s, false),
                BatchNorm::new(format!("{key}.down.bn"), cout),
            )
        });
        Self {
            conv1: ConvBnRelu::new(&format!("{key}.a"), cin, cout, dim.kernel(3), s),
            conv2: Conv::new(format!("{key}.b.conv"), cout, cout, dim.kernel(3), [1, 1, 1], false),
            bn2: BatchNorm::new(format!("{key}.b.bn"), cout),
            shortcut,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut crate::seed::Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.bn2.init(store);
        if let Some((c, b)) = &self.shortcut {
            c.init(store, rng);
            b.init(store);
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y)?;
        let short = match &self.shortcut {
            Some((c, b)) => {
                let s = c.forward(g, store, x)?;
                b.forward(g, store, s)?
            }
            None => x,
        };
        let sum = g.add(y, short)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    /// ResNet-18 layout: 7x7/2 stem, 3x3/2 max pool, four residual stages.
    Residual { stem: ConvBnRelu, stages: Vec<Vec<BasicBlock>> },
    /// 3D U-Net layout: double convolutions separated by 2x max pooling.
    DoubleConv { stages: Vec<[ConvBnRelu; 2]> },
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

/// Handles to one forward pass.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub bottleneck: NodeId,
    /// Encoder stage outputs at rates 2..32 (the last is the bottleneck).
    pub encoder: [NodeId; LEVELS],
    /// `F1..F_k` for the `k` levels that were computed.
    pub levels: Vec<NodeId>,
}

impl Pyramid {
    /// `F_i` for `i` in `1..=5`.
    pub fn level(&self, i: usize) -> NodeId {
        self.levels[i - 1]
    }
}

/// Test hook: what the decoder sees of the non-bottleneck encoder maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderTap {
    #[default]
    Normal,
    /// Replace every non-bottleneck encoder map with zeros before the
    /// decoder can read it.
    ZeroNonBottleneck,
}

#[derive(Clone, Debug)]
pub struct NsUnet {
    pub config: ModelConfig,
    encoder: Encoder,
    decoder: Vec<DecoderBlock>,
}

impl NsUnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.dimensionality;
        let w = config.stage_widths();
        let encoder = match dim {
            Dimensionality::D2 => {
                let stem = ConvBnRelu::new("encoder.stem", config.in_channels, w[0], dim.kernel(7), [1, 2, 2]);
                let mut stages = Vec::new();
                for s in 1..LEVELS {
                    let stride = if s == 1 { 1 } else { 2 };
                    let blocks = (0..config.blocks_per_stage)
                        .map(|b| {
                            let cin = if b == 0 { w[s - 1] } else { w[s] };
                            let st = if b == 0 { stride } else { 1 };
                            BasicBlock::new(&format!("encoder.layer{s}.{b}"), cin, w[s], st, dim)
                        })
                        .collect();
                    stages.push(blocks);
                }
                Encoder::Residual { stem, stages }
            }
            Dimensionality::D3 => {
                let stages = (0..LEVELS)
                    .map(|s| {
                        let cin = if s == 0 { config.in_channels } else { w[s - 1] };
                        let stride = if s == 0 { [2; 3] } else { [1; 3] };
                        [
                            ConvBnRelu::new(&format!("encoder.stage{s}.a"), cin, w[s], dim.kernel(3), stride),
                            ConvBnRelu::new(&format!("encoder.stage{s}.b"), w[s], w[s], dim.kernel(3), [1; 3]),
                        ]
                    })
                    .collect();
                Encoder::DoubleConv { stages }
            }
        };
        let c = config.decoder_channels;
        let dec_in = config.decoder_in_channels();
        let decoder = (0..LEVELS)
            .map(|i| DecoderBlock {
                a: ConvBnRelu::new(&format!("decoder.{}.a", i + 1), dec_in[i], c, dim.kernel(3), [1; 3]),
                b: ConvBnRelu::new(&format!("decoder.{}.b", i + 1), c, c, dim.kernel(3), [1; 3]),
            })
            .collect();
        Ok(Self { config, encoder, decoder })
    }

    /// Architecture plus seeded He-initialised parameters.
    pub fn build<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let model = Self::new(config)?;
        let store = model.init_params(seed);
        Ok((model, store))
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = seed::rng(seed, Stream::Init, &[0]);
        let mut store = ParamStore::new();
        match &self.encoder {
            Encoder::Residual { stem, stages } => {
                stem.init(&mut store, &mut rng);
                for b in stages.iter().flatten() {
                    b.init(&mut store, &mut rng);
                }
            }
            Encoder::DoubleConv { stages } => {
                for s in stages.iter().flatten() {
                    s.init(&mut store, &mut rng);
                }
            }
        }
        for d in &self.decoder {
            d.a.init(&mut store, &mut rng);
            d.b.init(&mut store, &mut rng);
        }
        store
    }

    pub fn shapes(&self, input: [usize; 3]) -> Result<PyramidShapes> {
        trace_shapes(self.config.dimensionality, input)
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s[1] != self.config.in_channels {
            return shape_err(format!("model expects {} channels, got {:?}", self.config.in_channels, s));
        }
        if s[0] == 0 || s[2..].contains(&0) {
            return shape_err(format!("non-positive input shape {s:?}"));
        }
        if self.config.dimensionality == Dimensionality::D2 && s[2] != 1 {
            return shape_err(format!("2D model got a volume {s:?}"));
        }
        Ok(())
    }

    /// Encoder stage outputs at rates 2..32.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<[NodeId; LEVELS]> {
        self.check_input(g, x)?;
        let mut out = [0; LEVELS];
        match &self.encoder {
            Encoder::Residual { stem, stages } => {
                let mut h = stem.forward(g, store, x)?;
                out[0] = h;
                h = clamped_max_pool(g, h, [1, 3, 3], [1, 2, 2], [0, 1, 1])?;
                for (s, blocks) in stages.iter().enumerate() {
                    for b in blocks {
                        h = b.forward(g, store, h)?;
                    }
                    out[s + 1] = h;
                }
            }
            Encoder::DoubleConv { stages } => {
                let mut h = x;
                for (s, [a, b]) in stages.iter().enumerate() {
                    if s > 0 {
                        h = clamped_max_pool(g, h, [2, 2, 2], [2, 2, 2], [0, 0, 0])?;
                    }
                    h = a.forward(g, store, h)?;
                    h = b.forward(g, store, h)?;
                    out[s] = h;
                }
            }
        }
        Ok(out)
    }

    /// Bottleneck map `F0` only.
    pub fn encoder_features<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        Ok(self.encode(g, store, x)?[LEVELS - 1])
    }

    /// Full five-level pyramid.
    pub fn forward_pyramid<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<Pyramid> {
        self.forward_levels(g, store, x, LEVELS, EncoderTap::Normal)
    }

    /// Pyramid levels `F1..F_upto`; deeper levels are not computed.
    pub fn forward_levels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        upto: usize,
        tap: EncoderTap,
    ) -> Result<Pyramid> {
        if !(1..=LEVELS).contains(&upto) {
            return shape_err(format!("pyramid level {upto} outside 1..={LEVELS}"));
        }
        let enc = self.encode(g, store, x)?;
        let input_dims = {
            let s = g.shape(x);
            [s[2], s[3], s[4]]
        };
        self.decode(g, store, &enc, input_dims, upto, tap)
    }

    /// Decoder over precomputed encoder maps.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc: &[NodeId; LEVELS],
        input_dims: [usize; 3],
        upto: usize,
        tap: EncoderTap,
    ) -> Result<Pyramid> {
        let mut visible = *enc;
        if tap == EncoderTap::ZeroNonBottleneck {
            for slot in visible.iter_mut().take(LEVELS - 1) {
                let zeros = Tensor::zeros(g.shape(*slot));
                *slot = g.input(zeros);
            }
        }
        let mut levels = Vec::with_capacity(upto);
        let mut h = enc[LEVELS - 1];
        for (i, block) in self.decoder.iter().enumerate().take(upto) {
            let target = if i < 4 {
                let s = g.shape(visible[3 - i]);
                [s[2], s[3], s[4]]
            } else {
                input_dims
            };
            let mut y = g.resample(h, target)?;
            if self.config.use_skip_connections && i < 4 {
                y = g.concat(y, visible[3 - i])?;
            }
            y = block.a.forward(g, store, y)?;
            y = block.b.forward(g, store, y)?;
            levels.push(y);
            h = y;
        }
        Ok(Pyramid { bottleneck: enc[LEVELS - 1], encoder: *enc, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: Dimensionality, skip: bool) -> ModelConfig {
        ModelConfig {
            dimensionality: dim,
            in_channels: 1,
            decoder_channels: 4,
            encoder_width_multiplier: 0.0625,
            blocks_per_stage: 1,
            use_skip_connections: skip,
            encoder_widths: vec![],
        }
    }

    #[test]
    fn shape_trace_matches_rate_schedule() {
        let s = trace_shapes(Dimensionality::D2, [1, 224, 224]).unwrap();
        assert_eq!(s.bottleneck, [1, 7, 7]);
        let sides: Vec<usize> = s.levels.iter().map(|d| d[1]).collect();
        assert_eq!(sides, vec![14, 28, 56, 112, 224]);
        let s3 = trace_shapes(Dimensionality::D3, [64, 64, 32]).unwrap();
        assert_eq!(s3.bottleneck, [2, 2, 1]);
        assert_eq!(s3.levels[4], [64, 64, 32]);
        let local = trace_shapes(Dimensionality::D3, [16, 16, 16]).unwrap();
        assert_eq!(local.bottleneck, [1, 1, 1]);
        assert_eq!(local.levels, [[1, 1, 1], [2, 2, 2], [4, 4, 4], [8, 8, 8], [16, 16, 16]]);
        assert!(trace_shapes(Dimensionality::D3, [0, 4, 4]).is_err());
    }

    #[test]
    fn skip_toggle_changes_decoder_inputs() {
        let mut c = ModelConfig { dimensionality: Dimensionality::D2, decoder_channels: 64, ..Default::default() };
        assert_eq!(c.decoder_in_channels(), [512, 64, 64, 64, 64]);
        c.use_skip_connections = true;
        // concatenated encoder widths at rates 16, 8, 4, 2
        assert_eq!(c.decoder_in_channels(), [512 + 256, 64 + 128, 64 + 64, 64 + 64, 64]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = NsUnet::build::<f32>(cfg(Dimensionality::D3, false), 3).unwrap();
        let (_, b) = NsUnet::build::<f32>(cfg(Dimensionality::D3, false), 3).unwrap();
        let (_, c) = NsUnet::build::<f32>(cfg(Dimensionality::D3, false), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.num_params() > 0);
    }

    #[test]
    fn forward_shapes_follow_trace_2d_and_3d() {
        for (dim, input) in [(Dimensionality::D2, [1, 64, 48]), (Dimensionality::D3, [16, 16, 16]), (Dimensionality::D3, [32, 16, 8])] {
            let (m, store) = NsUnet::build::<f32>(cfg(dim, false), 1).unwrap();
            let mut g = Graph::new(true);
            let x = g.input(Tensor::full([2, 1, input[0], input[1], input[2]], 0.5));
            let p = m.forward_pyramid(&mut g, &store, x).unwrap();
            let trace = m.shapes(input).unwrap();
            for i in 1..=LEVELS {
                let s = g.shape(p.level(i));
                assert_eq!([s[2], s[3], s[4]], trace.levels[i - 1]);
                assert_eq!(s[1], 4);
            }
            let b = g.shape(p.bottleneck);
            assert_eq!([b[2], b[3], b[4]], trace.bottleneck);
            assert!(p.levels.iter().all(|&l| g.value(l).is_finite()));
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let (m, store) = NsUnet::build::<f32>(cfg(Dimensionality::D3, false), 1).unwrap();
        let mut g = Graph::new(true);
        let x = g.input(Tensor::zeros([1, 2, 8, 8, 8]));
        assert!(m.forward_pyramid(&mut g, &store, x).is_err());
    }

    #[test]
    fn skip_mode_reads_encoder_maps() {
        let (m, store) = NsUnet::build::<f64>(cfg(Dimensionality::D3, true), 2).unwrap();
        let mut g = Graph::new(true);
        let data = (0..2 * 16 * 16 * 8).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let x = g.input(Tensor::from_vec([2, 1, 16, 16, 8], data).unwrap());
        let a = m.forward_levels(&mut g, &store, x, 5, EncoderTap::Normal).unwrap();
        let b = m.forward_levels(&mut g, &store, x, 5, EncoderTap::ZeroNonBottleneck).unwrap();
        assert!(g.value(a.level(5)).max_abs_diff(g.value(b.level(5))) > 0.0);
    }
}
