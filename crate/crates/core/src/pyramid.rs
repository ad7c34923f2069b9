//! Four-level RGB-D feature pyramid with channel, spatial and cross attention.
//!
//! RGB and depth are processed by two independent strided streams. At every
//! level the two stream outputs are fused: channel attention gates the RGB
//! features, spatial attention gates the depth features, and on the two
//! coarsest levels a pixel-token cross attention between the modalities is
//! added. The gated maps are concatenated and merged by a 1×1 convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvLayout, Graph, Var};
use crate::nn::{Conv2d, Init, Linear, ParamStore};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
pub const DEFAULT_WIDTHS: [usize; LEVELS] = [16, 32, 64, 96];
/// Hidden width of the channel-attention bottleneck is `channels / CA_REDUCTION`.
pub const CA_REDUCTION: usize = 4;
/// Levels whose fusion includes cross attention.
pub const CROSS_ATTENTION_LEVELS: [usize; 2] = [2, 3];
/// Input sides must be divisible by this factor.
pub const SIZE_MULTIPLE: usize = 1 << LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Depth,
    Fused,
}

/// A `channels × height × width` feature grid at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub level: usize,
    pub modality: Modality,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: usize, modality: Modality) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::shape(format!("feature map must be C×H×W, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self { data, level, modality })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Squeeze-excitation gate over concatenated average- and max-pooled channel
/// descriptors.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / CA_REDUCTION).max(1);
        Self {
            fc1: Linear::new(store, &format!("{name}/fc1"), 2 * channels, hidden, Init::He, rng),
            fc2: Linear::new(store, &format!("{name}/fc2"), hidden, channels, Init::He, rng),
            channels,
        }
    }

    /// Per-channel gate, shape `C×1×1`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gap = g.global_avg_pool(x);
        let gmp = g.global_max_pool(x);
        let desc = g.concat(&[gap, gmp]);
        let desc = g.reshape(desc, &[1, 2 * self.channels]);
        let h = self.fc1.forward(g, store, desc);
        let h = g.relu(h);
        let s = self.fc2.forward(g, store, h);
        let s = g.sigmoid(s);
        g.reshape(s, &[self.channels, 1, 1])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gate = self.gate(g, store, x);
        g.mul(x, gate)
    }

    pub fn apply(&self, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.channels {
            return Err(Error::shape(format!(
                "channel attention configured for {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let mut g = Graph::new();
        let v = g.constant(x.data.clone());
        let out = self.forward(&mut g, store, v);
        FeatureMap::new(g.value(out).clone(), x.level, x.modality)
    }
}

/// Per-pixel gate from a 3×3 convolution over channel-wise max and mean.
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}/conv"), 2, 1, 3, ConvLayout::same(3, 1), Init::He, rng),
        }
    }

    /// Per-pixel gate, shape `1×H×W`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mx = g.channel_max(x);
        let av = g.channel_mean(x);
        let stack = g.concat(&[mx, av]);
        let s = self.conv.forward(g, store, stack);
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gate = self.gate(g, store, x);
        g.mul(x, gate)
    }

    pub fn apply(&self, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let v = g.constant(x.data.clone());
        let out = self.forward(&mut g, store, v);
        FeatureMap::new(g.value(out).clone(), x.level, x.modality)
    }
}

/// Single-head bidirectional attention between RGB and depth pixel tokens.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub q_rgb: Linear,
    pub k_rgb: Linear,
    pub v_rgb: Linear,
    pub q_depth: Linear,
    pub k_depth: Linear,
    pub v_depth: Linear,
    pub channels: usize,
    pub embed: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let embed = channels;
        let bound = (3.0 / channels as f64).sqrt();
        let mut lin = |s: &str, rng: &mut R| Linear::new(store, &format!("{name}/{s}"), channels, embed, Init::Uniform(bound), rng);
        Self {
            q_rgb: lin("q_rgb", rng),
            k_rgb: lin("k_rgb", rng),
            v_rgb: lin("v_rgb", rng),
            q_depth: lin("q_depth", rng),
            k_depth: lin("k_depth", rng),
            v_depth: lin("v_depth", rng),
            channels,
            embed,
        }
    }

    /// Scaling factor `d_k`.
    pub fn key_dim(&self) -> usize {
        self.embed
    }

    fn tokens(g: &mut Graph, x: Var) -> Var {
        let (c, h, w) = g.value(x).dims3();
        let flat = g.reshape(x, &[c, h * w]);
        g.transpose(flat)
    }

    /// Attention matrices `(softmax(q_r k_dᵀ/√d), softmax(q_d k_rᵀ/√d))`, each `N×N`.
    pub fn attention_maps(&self, g: &mut Graph, store: &ParamStore, x_rgb: Var, x_depth: Var) -> (Var, Var, Var, Var) {
        let tr = Self::tokens(g, x_rgb);
        let td = Self::tokens(g, x_depth);
        let scale = 1.0 / (self.key_dim() as f64).sqrt();
        let qr = self.q_rgb.forward(g, store, tr);
        let kr = self.k_rgb.forward(g, store, tr);
        let vr = self.v_rgb.forward(g, store, tr);
        let qd = self.q_depth.forward(g, store, td);
        let kd = self.k_depth.forward(g, store, td);
        let vd = self.v_depth.forward(g, store, td);
        let kd_t = g.transpose(kd);
        let s1 = g.matmul(qr, kd_t);
        let s1 = g.scale(s1, scale);
        let a1 = g.softmax_rows(s1);
        let kr_t = g.transpose(kr);
        let s2 = g.matmul(qd, kr_t);
        let s2 = g.scale(s2, scale);
        let a2 = g.softmax_rows(s2);
        (a1, vd, a2, vr)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_rgb: Var, x_depth: Var) -> Var {
        let (_, h, w) = g.value(x_rgb).dims3();
        let (a1, vd, a2, vr) = self.attention_maps(g, store, x_rgb, x_depth);
        let o1 = g.matmul(a1, vd);
        let o2 = g.matmul(a2, vr);
        let o = g.add(o1, o2);
        let o = g.transpose(o);
        g.reshape(o, &[self.embed, h, w])
    }

    pub fn apply(&self, store: &ParamStore, x_rgb: &FeatureMap, x_depth: &FeatureMap) -> Result<FeatureMap> {
        if x_rgb.data.shape() != x_depth.data.shape() {
            return Err(Error::shape(format!(
                "cross attention inputs differ: {:?} vs {:?}",
                x_rgb.data.shape(),
                x_depth.data.shape()
            )));
        }
        if x_rgb.channels() != self.channels {
            return Err(Error::shape(format!(
                "cross attention configured for {} channels, got {}",
                self.channels,
                x_rgb.channels()
            )));
        }
        let mut g = Graph::new();
        let r = g.constant(x_rgb.data.clone());
        let d = g.constant(x_depth.data.clone());
        let out = self.forward(&mut g, store, r, d);
        FeatureMap::new(g.value(out).clone(), x_rgb.level, Modality::Fused)
    }
}

/// Pre-activation residual block of two 3×3 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let layout = ConvLayout::same(3, 1);
        Self {
            conv1: Conv2d::new(store, &format!("{name}/conv1"), channels, channels, 3, layout, Init::He, rng),
            conv2: Conv2d::new(store, &format!("{name}/conv2"), channels, channels, 3, layout, Init::He, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = g.leaky_relu(x);
        let h = self.conv1.forward(g, store, h);
        let h = g.leaky_relu(h);
        let h = self.conv2.forward(g, store, h);
        g.add(x, h)
    }
}

/// One single-modality encoder: per level a stride-2 convolution followed by a residual block.
#[derive(Debug, Clone)]
pub struct Stream {
    pub down: Vec<Conv2d>,
    pub blocks: Vec<ResidualBlock>,
}

impl Stream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, widths: &[usize; LEVELS], rng: &mut R) -> Self {
        let mut down = Vec::with_capacity(LEVELS);
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut cin = in_channels;
        for (l, &w) in widths.iter().enumerate() {
            down.push(Conv2d::new(store, &format!("{name}/l{l}/down"), cin, w, 3, ConvLayout::strided(3, 2), Init::He, rng));
            blocks.push(ResidualBlock::new(store, &format!("{name}/l{l}/res"), w, rng));
            cin = w;
        }
        Self { down, blocks }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(LEVELS);
        let mut h = x;
        for (down, block) in self.down.iter().zip(&self.blocks) {
            h = down.forward(g, store, h);
            h = g.leaky_relu(h);
            h = block.forward(g, store, h);
            out.push(h);
        }
        out
    }
}

/// Attention fusion of one level's RGB and depth features.
#[derive(Debug, Clone, Copy)]
pub struct FusionBlock {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub cross: Option<CrossAttention>,
    pub merge: Conv2d,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, with_cross: bool, rng: &mut R) -> Self {
        let channel = ChannelAttention::new(store, &format!("{name}/ca"), channels, rng);
        let spatial = SpatialAttention::new(store, &format!("{name}/sa"), rng);
        let cross = with_cross.then(|| CrossAttention::new(store, &format!("{name}/xa"), channels, rng));
        let parts = if with_cross { 3 } else { 2 };
        let merge = Conv2d::new(store, &format!("{name}/merge"), parts * channels, channels, 1, ConvLayout::same(1, 1), Init::He, rng);
        Self {
            channel,
            spatial,
            cross,
            merge,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_rgb: Var, x_depth: Var) -> Var {
        let ca = self.channel.forward(g, store, x_rgb);
        let sa = self.spatial.forward(g, store, x_depth);
        let cat = match &self.cross {
            Some(xa) => {
                let x = xa.forward(g, store, x_rgb, x_depth);
                g.concat(&[ca, sa, x])
            }
            None => g.concat(&[ca, sa]),
        };
        self.merge.forward(g, store, cat)
    }
}

/// Per-level graph handles produced by [`FeaturePyramid::forward`].
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub rgb: Vec<Var>,
    pub depth: Vec<Var>,
    pub fused: Vec<Var>,
}

/// Concrete per-level feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub rgb: FeatureMap,
    pub depth: FeatureMap,
    pub fused: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub widths: [usize; LEVELS],
    pub rgb: Stream,
    pub depth: Stream,
    pub fusion: Vec<FusionBlock>,
}

impl FeaturePyramid {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: [usize; LEVELS], rng: &mut R) -> Self {
        let rgb = Stream::new(store, &format!("{name}/rgb"), 3, &widths, rng);
        let depth = Stream::new(store, &format!("{name}/depth"), 1, &widths, rng);
        let fusion = (0..LEVELS)
            .map(|l| FusionBlock::new(store, &format!("{name}/fuse/l{l}"), widths[l], CROSS_ATTENTION_LEVELS.contains(&l), rng))
            .collect();
        Self {
            widths,
            rgb,
            depth,
            fusion,
        }
    }

    /// Validates a `4×H×W` RGB-D input.
    pub fn check_input(shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 4 {
            return Err(Error::shape(format!("RGB-D input must be 4×H×W, got {shape:?}")));
        }
        if shape[1] % SIZE_MULTIPLE != 0 || shape[2] % SIZE_MULTIPLE != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::shape(format!(
                "input size {}×{} is not a positive multiple of {SIZE_MULTIPLE}",
                shape[2], shape[1]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rgbd: Var) -> PyramidVars {
        let rgb_in = g.narrow(rgbd, 0, 3);
        let depth_in = g.narrow(rgbd, 3, 1);
        let rgb = self.rgb.forward(g, store, rgb_in);
        let depth = self.depth.forward(g, store, depth_in);
        let fused = (0..LEVELS)
            .map(|l| self.fusion[l].forward(g, store, rgb[l], depth[l]))
            .collect();
        PyramidVars { rgb, depth, fused }
    }

    /// Runs the pyramid on a concrete `4×H×W` image.
    pub fn extract(&self, store: &ParamStore, rgbd: &Tensor) -> Result<Vec<PyramidLevel>> {
        Self::check_input(rgbd.shape())?;
        let mut g = Graph::new();
        let x = g.constant(rgbd.clone());
        let vars = self.forward(&mut g, store, x);
        (0..LEVELS)
            .map(|l| {
                Ok(PyramidLevel {
                    rgb: FeatureMap::new(g.value(vars.rgb[l]).clone(), l, Modality::Rgb)?,
                    depth: FeatureMap::new(g.value(vars.depth[l]).clone(), l, Modality::Depth)?,
                    fused: FeatureMap::new(g.value(vars.fused[l]).clone(), l, Modality::Fused)?,
                })
            })
            .collect()
    }
}
