//! Depth-aware coarse-to-fine optical flow.
//!
//! At the coarsest level the flow head output is gated by a depth-derived
//! weight map. Finer levels upsample the previous flow, warp the second
//! frame's features by it, and add a depth-gated residual. A dilated context
//! network corrects the finest-level flow.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvLayout, Graph, Var};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::pyramid::{FeatureMap, Modality};
use crate::tensor::Tensor;

pub const DEPTH_FEATURES: usize = 32;
pub const HEAD_WIDTHS: [usize; 2] = [128, 64];
pub const CONTEXT_WIDTH: usize = 32;
pub const CONTEXT_DILATIONS: [usize; 4] = [1, 2, 4, 1];

/// Per-pixel metric depth with a validity mask. Invalid pixels carry depth 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from raw depths; non-positive or non-finite entries are invalid.
    pub fn from_raw(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::shape(format!("depth buffer has {} entries, expected {}×{}", depth.len(), width, height)));
        }
        let valid: Vec<bool> = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = depth.iter().zip(&valid).map(|(d, v)| if *v { *d } else { 0.0 }).collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn is_dense(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    /// Inverse depth as a `1×H×W` tensor, 0 where invalid.
    pub fn inverse_depth(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.valid[i] { 1.0 / self.depth[i] } else { 0.0 })
    }

    /// Averages valid depths over `factor×factor` cells; empty cells are invalid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::shape(format!(
                "cannot downsample {}×{} by {}",
                self.width, self.height, factor
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut depth = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0usize);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = (y * factor + dy) * self.width + x * factor + dx;
                        if self.valid[i] {
                            s += self.depth[i];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    depth[y * w + x] = s / n as f64;
                }
            }
        }
        Self::from_raw(w, h, depth)
    }
}

/// A `2×H×W` displacement field in pixels of its level's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Tensor,
    pub level: usize,
}

impl FlowField {
    pub fn new(data: Tensor, level: usize) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != 2 {
            return Err(Error::shape(format!("flow must be 2×H×W, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::InvalidInput("flow contains non-finite values".into()));
        }
        Ok(Self { data, level })
    }

    pub fn zeros(height: usize, width: usize, level: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, height, width]),
            level,
        }
    }

    pub fn constant(height: usize, width: usize, level: usize, u: f64, v: f64) -> Self {
        let hw = height * width;
        Self {
            data: Tensor::from_fn(&[2, height, width], |i| if i < hw { u } else { v }),
            level,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Convolutional gate network `G(D)` over inverse depth.
#[derive(Debug, Clone, Copy)]
pub struct DepthModulation {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub out: Conv2d,
}

impl DepthModulation {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let s3 = ConvLayout::same(3, 1);
        Self {
            conv1: Conv2d::new(store, &format!("{name}/conv1"), 1, DEPTH_FEATURES / 2, 3, s3, Init::He, rng),
            conv2: Conv2d::new(store, &format!("{name}/conv2"), DEPTH_FEATURES / 2, DEPTH_FEATURES, 3, s3, Init::He, rng),
            out: Conv2d::new(store, &format!("{name}/out"), DEPTH_FEATURES, 1, 1, ConvLayout::same(1, 1), Init::He, rng),
        }
    }

    /// Returns `(depth features 32×H×W, gate 1×H×W)` for an inverse-depth input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inv_depth: Var) -> (Var, Var) {
        let h = self.conv1.forward(g, store, inv_depth);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let feats = g.relu(h);
        let gate = self.out.forward(g, store, feats);
        (feats, g.sigmoid(gate))
    }

    /// Per-pixel weight map in `(0, 1)`.
    pub fn weights(&self, store: &ParamStore, depth: &DepthMap) -> Tensor {
        let mut g = Graph::new();
        let d = g.constant(depth.inverse_depth());
        let (_, gate) = self.forward(&mut g, store, d);
        g.value(gate).clone()
    }
}

/// 1×1-convolution MLP `(128, 64, 2)` predicting flow from concatenated features.
#[derive(Debug, Clone, Copy)]
pub struct FlowHead {
    pub layers: [Conv2d; 3],
    pub with_prev: bool,
}

impl FlowHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, with_prev: bool, rng: &mut R) -> Self {
        let s1 = ConvLayout::same(1, 1);
        let cin = in_channels + if with_prev { 2 } else { 0 };
        let [h1, h2] = HEAD_WIDTHS;
        Self {
            layers: [
                Conv2d::new(store, &format!("{name}/fc1"), cin, h1, 1, s1, Init::He, rng),
                Conv2d::new(store, &format!("{name}/fc2"), h1, h2, 1, s1, Init::He, rng),
                Conv2d::new(store, &format!("{name}/fc3"), h2, 2, 1, s1, Init::Uniform(1e-2), rng),
            ],
            with_prev,
        }
    }

    /// Ungated head output and the last hidden activation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[Var]) -> (Var, Var) {
        let x = g.concat(inputs);
        let h = self.layers[0].forward(g, store, x);
        let h = g.leaky_relu(h);
        let h = self.layers[1].forward(g, store, h);
        let hidden = g.leaky_relu(h);
        (self.layers[2].forward(g, store, hidden), hidden)
    }
}

/// Dilated convolutions producing an additive correction to the finest flow.
#[derive(Debug, Clone)]
pub struct ContextNet {
    pub layers: Vec<Conv2d>,
}

impl ContextNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let n = CONTEXT_DILATIONS.len();
        let layers = CONTEXT_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let cin = if i == 0 { 4 } else { CONTEXT_WIDTH };
                let (cout, init) = if i + 1 == n { (2, Init::Zero) } else { (CONTEXT_WIDTH, Init::He) };
                Conv2d::new(store, &format!("{name}/conv{i}"), cin, cout, 3, ConvLayout::same(3, d), init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u_init: Var, u_refined: Var) -> Var {
        let mut h = g.concat(&[u_init, u_refined]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = g.leaky_relu(h);
            }
        }
        g.add(u_refined, h)
    }
}

/// Depth-gated flow `u = head(·) · G(D)`, where `G` is the depth modulation gate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_flow_op(
    g: &mut Graph,
    store: &ParamStore,
    head: &FlowHead,
    modulation: &DepthModulation,
    features: Var,
    cost_features: Var,
    inv_depth: Var,
    prev_flow: Option<Var>,
) -> Var {
    let (depth_feats, gate) = modulation.forward(g, store, inv_depth);
    gated_flow_op(g, store, head, features, cost_features, depth_feats, gate, prev_flow)
}

/// [`estimate_flow_op`] with the modulation outputs already computed.
#[allow(clippy::too_many_arguments)]
pub fn gated_flow_op(
    g: &mut Graph,
    store: &ParamStore,
    head: &FlowHead,
    features: Var,
    cost_features: Var,
    depth_features: Var,
    gate: Var,
    prev_flow: Option<Var>,
) -> Var {
    let mut inputs = vec![features, cost_features, depth_features];
    inputs.extend(prev_flow);
    let (raw, _) = head.forward(g, store, &inputs);
    g.mul(raw, gate)
}

/// Concrete-value wrapper around [`estimate_flow_op`], with resolution checks.
#[allow(clippy::too_many_arguments)]
pub fn estimate_flow(
    store: &ParamStore,
    head: &FlowHead,
    modulation: &DepthModulation,
    features: &FeatureMap,
    cost_features: &FeatureMap,
    depth: &DepthMap,
    prev_flow: Option<&FlowField>,
    level: usize,
) -> Result<FlowField> {
    let (h, w) = (features.height(), features.width());
    let same = |hh: usize, ww: usize| hh == h && ww == w;
    if !same(cost_features.height(), cost_features.width()) || !same(depth.height(), depth.width()) {
        return Err(Error::shape("flow inputs are not at one resolution"));
    }
    if let Some(p) = prev_flow {
        if !same(p.height(), p.width()) {
            return Err(Error::shape("previous flow resolution mismatch"));
        }
    }
    if prev_flow.is_some() != head.with_prev {
        return Err(Error::InvalidInput("previous flow presence does not match the head configuration".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(features.data.clone());
    let c = g.constant(cost_features.data.clone());
    let d = g.constant(depth.inverse_depth());
    let p = prev_flow.map(|p| g.constant(p.data.clone()));
    let u = estimate_flow_op(&mut g, store, head, modulation, f, c, d, p);
    FlowField::new(g.value(u).clone(), level)
}

/// `u = coarse + gate · residual`, gate broadcast over both flow channels.
pub fn refine_flow(coarse: &FlowField, residual: &FlowField, gate: &Tensor) -> Result<FlowField> {
    let (h, w) = (coarse.height(), coarse.width());
    if residual.data.shape() != coarse.data.shape() || gate.shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "refine inputs: coarse {:?}, residual {:?}, gate {:?}",
            coarse.data.shape(),
            residual.data.shape(),
            gate.shape()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(coarse.data.clone());
    let r = g.constant(residual.data.clone());
    let gt = g.constant(gate.clone());
    let u = refine_flow_op(&mut g, c, r, gt);
    FlowField::new(g.value(u).clone(), coarse.level)
}

pub fn refine_flow_op(g: &mut Graph, coarse: Var, residual: Var, gate: Var) -> Var {
    let gated = g.mul(residual, gate);
    g.add(coarse, gated)
}

/// Bilinear source coordinate along one axis for 2× upsampling (half-pixel
/// centres, clamped to the border). Returns `(i0, i1, frac)`.
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear 2× spatial upsampling of a `C×H×W` tensor (values unchanged).
pub fn upsample2x_op(g: &mut Graph, x: Var) -> Var {
    let (c, h, w) = g.value(x).dims3();
    let (oh, ow) = (2 * h, 2 * w);
    let src = g.value(x).data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    {
        let o = out.data_mut();
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = upsample_taps(y, h);
                for xx in 0..ow {
                    let (x0, x1, fx) = upsample_taps(xx, w);
                    let p = |yy: usize, xq: usize| src[(ch * h + yy) * w + xq];
                    o[(ch * oh + y) * ow + xx] = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                        + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                }
            }
        }
    }
    g.custom(
        &[x],
        out,
        Box::new(move |args| {
            let gr = args.grad.data();
            let mut d = Tensor::zeros(&[c, h, w]);
            let dd = d.data_mut();
            for ch in 0..c {
                for y in 0..oh {
                    let (y0, y1, fy) = upsample_taps(y, h);
                    for xx in 0..ow {
                        let (x0, x1, fx) = upsample_taps(xx, w);
                        let gv = gr[(ch * oh + y) * ow + xx];
                        dd[(ch * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dd[(ch * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                        dd[(ch * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                        dd[(ch * h + y1) * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Upsamples flow to twice the resolution and doubles its magnitude.
pub fn upsample_flow_op(g: &mut Graph, u: Var) -> Var {
    let up = upsample2x_op(g, u);
    g.scale(up, 2.0)
}

pub fn upsample_flow(u: &FlowField) -> FlowField {
    let mut g = Graph::new();
    let v = g.constant(u.data.clone());
    let up = upsample_flow_op(&mut g, v);
    FlowField {
        data: g.value(up).clone(),
        level: u.level.saturating_sub(1),
    }
}

/// Bilinear corners of sample point `(sx, sy)`: flat index (if in image) and weight.
#[inline]
fn sample_corners(sx: f64, sy: f64, w: usize, h: usize) -> ([Option<usize>; 4], [f64; 4], f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |x: isize, y: isize| (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize);
    (
        [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        fx,
        fy,
    )
}

/// Samples `F` at `(x + u_x, y + u_y)` bilinearly; out-of-image corners read 0.
pub fn warp_op(g: &mut Graph, features: Var, flow: Var) -> Var {
    let (c, h, w) = g.value(features).dims3();
    assert_eq!(g.shape(flow), &[2, h, w], "warp flow must be 2×H×W at the feature resolution");
    let hw = h * w;
    let f = g.value(features).data();
    let u = g.value(flow).data();
    let mut out = Tensor::zeros(&[c, h, w]);
    {
        let o = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (idx, wt, _, _) = sample_corners(x as f64 + u[p], y as f64 + u[hw + p], w, h);
                for ch in 0..c {
                    let base = ch * hw;
                    let mut s = 0.0;
                    for k in 0..4 {
                        if let Some(i) = idx[k] {
                            s += wt[k] * f[base + i];
                        }
                    }
                    o[base + p] = s;
                }
            }
        }
    }
    g.custom(
        &[features, flow],
        out,
        Box::new(move |args| {
            let (f, u) = (args.inputs[0].data(), args.inputs[1].data());
            let gr = args.grad.data();
            let mut gf = args.needs[0].then(|| Tensor::zeros(&[c, h, w]));
            let mut gu = args.needs[1].then(|| Tensor::zeros(&[2, h, w]));
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (idx, wt, fx, fy) = sample_corners(x as f64 + u[p], y as f64 + u[hw + p], w, h);
                    let val = |ch: usize, k: usize| idx[k].map_or(0.0, |i| f[ch * hw + i]);
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = gr[ch * hw + p];
                        if let Some(gf) = gf.as_mut() {
                            for k in 0..4 {
                                if let Some(i) = idx[k] {
                                    gf.data_mut()[ch * hw + i] += gv * wt[k];
                                }
                            }
                        }
                        if gu.is_some() {
                            let (v00, v10, v01, v11) = (val(ch, 0), val(ch, 1), val(ch, 2), val(ch, 3));
                            dx += gv * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                            dy += gv * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                        }
                    }
                    if let Some(gu) = gu.as_mut() {
                        gu.data_mut()[p] = dx;
                        gu.data_mut()[hw + p] = dy;
                    }
                }
            }
            vec![gf, gu]
        }),
    )
}

pub fn warp(features: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    if features.height() != flow.height() || features.width() != flow.width() {
        return Err(Error::shape("warp inputs are not at one resolution"));
    }
    let mut g = Graph::new();
    let f = g.constant(features.data.clone());
    let u = g.constant(flow.data.clone());
    let out = warp_op(&mut g, f, u);
    FeatureMap::new(g.value(out).clone(), features.level, features.modality)
}

/// Applies the context network to a pair of flows outside a training graph.
pub fn context_refine(store: &ParamStore, net: &ContextNet, u_init: &FlowField, u_refined: &FlowField) -> Result<FlowField> {
    if u_init.data.shape() != u_refined.data.shape() {
        return Err(Error::shape("context refinement inputs differ in shape"));
    }
    let mut g = Graph::new();
    let a = g.constant(u_init.data.clone());
    let b = g.constant(u_refined.data.clone());
    let out = net.forward(&mut g, store, a, b);
    FlowField::new(g.value(out).clone(), u_refined.level)
}

/// Wraps a depth tensor for tests and tools that build maps directly.
pub fn depth_feature_map(depth: &DepthMap, level: usize) -> FeatureMap {
    FeatureMap {
        data: depth.inverse_depth(),
        level,
        modality: Modality::Depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs_with, check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn depth_map_invariants_and_downsampling() {
        let d = DepthMap::from_raw(4, 2, vec![1.0, -1.0, f64::NAN, 2.0, 3.0, 0.0, 5.0, 6.0]).unwrap();
        assert_eq!(d.valid(), &[true, false, false, true, true, false, true, true]);
        assert_eq!(d.depth()[1], 0.0);
        assert_eq!(d.depth()[2], 0.0);
        let half = d.downsample(2).unwrap();
        assert_eq!(half.depth(), &[2.0, 13.0 / 3.0]);
        let empty = DepthMap::empty(4, 4).downsample(2).unwrap();
        assert_eq!(empty.valid_count(), 0);
        assert!(d.downsample(3).is_err());
        assert!(DepthMap::from_raw(3, 3, vec![1.0; 8]).is_err());
    }

    #[test]
    fn modulation_constant_plane_is_constant_inside() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let m = DepthModulation::new(&mut store, "g", &mut r);
        let d = DepthMap::from_raw(9, 7, vec![4.0; 63]).unwrap();
        let w = m.weights(&store, &d);
        assert_eq!(w.shape(), &[1, 7, 9]);
        let c = w.at3(0, 3, 4);
        // Two stacked 3×3 convolutions: pixels two away from the border see no padding.
        for y in 2..5 {
            for x in 2..7 {
                assert!((w.at3(0, y, x) - c).abs() < 1e-15);
            }
        }
        assert!(w.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zero_gate_gives_zero_flow() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let head = FlowHead::new(&mut store, "h", 4 + 8 + DEPTH_FEATURES, false, &mut r);
        let m = DepthModulation::new(&mut store, "g", &mut r);
        // Force the gate to sigmoid(-inf) = 0.
        let out_bias = m.out.bias;
        store.value_mut(out_bias).data_mut()[0] = -1e6;
        let f = FeatureMap::new(Tensor::randn(&[4, 3, 5], 1.0, &mut r), 1, Modality::Fused).unwrap();
        let c = FeatureMap::new(Tensor::randn(&[8, 3, 5], 1.0, &mut r), 1, Modality::Fused).unwrap();
        let d = DepthMap::from_raw(5, 3, vec![3.0; 15]).unwrap();
        let u = estimate_flow(&store, &head, &m, &f, &c, &d, None, 1).unwrap();
        assert_eq!(u.data.shape(), &[2, 3, 5]);
        assert!(u.data.data().iter().all(|v| *v == 0.0));
        let bad = DepthMap::from_raw(4, 3, vec![3.0; 12]).unwrap();
        assert!(estimate_flow(&store, &head, &m, &f, &c, &bad, None, 1).is_err());
    }

    #[test]
    fn gate_scaling_scales_flow_linearly() {
        let mut r = rng(3);
        let mut g = Graph::new();
        let raw = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut r));
        let gate = Tensor::uniform(&[1, 3, 4], 0.5, &mut r).map(|v| v + 0.5);
        let gv = g.constant(gate.clone());
        let u = g.mul(raw, gv);
        let scaled = g.constant(gate.scale(0.3));
        let u2 = g.mul(raw, scaled);
        let expect = g.value(u).scale(0.3);
        assert!(g.value(u2).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn refine_cases() {
        let mut r = rng(4);
        let coarse = FlowField::new(Tensor::randn(&[2, 3, 4], 1.0, &mut r), 0).unwrap();
        let zero = FlowField::zeros(3, 4, 0);
        let gate = Tensor::uniform(&[1, 3, 4], 1.0, &mut r);
        assert_eq!(refine_flow(&coarse, &zero, &gate).unwrap(), coarse);
        let res = FlowField::new(Tensor::randn(&[2, 3, 4], 1.0, &mut r), 0).unwrap();
        let ones = Tensor::full(&[1, 3, 4], 1.0);
        let plain = refine_flow(&coarse, &res, &ones).unwrap();
        assert!(plain.data.max_abs_diff(&coarse.data.zip_map(&res.data, |a, b| a + b)) < 1e-15);
        assert!(refine_flow(&coarse, &res, &Tensor::zeros(&[1, 4, 3])).is_err());
    }

    #[test]
    fn upsample_cases() {
        let z = upsample_flow(&FlowField::zeros(3, 4, 2));
        assert_eq!(z.data.shape(), &[2, 6, 8]);
        assert!(z.data.data().iter().all(|v| *v == 0.0));
        let c = upsample_flow(&FlowField::constant(3, 4, 2, 1.25, -0.5));
        assert_eq!(c.level, 1);
        for y in 0..6 {
            for x in 0..8 {
                assert!((c.data.at3(0, y, x) - 2.5).abs() < 1e-14);
                assert!((c.data.at3(1, y, x) + 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn warp_cases() {
        let mut r = rng(5);
        let f = FeatureMap::new(Tensor::randn(&[3, 4, 5], 1.0, &mut r), 0, Modality::Fused).unwrap();
        let same = warp(&f, &FlowField::zeros(4, 5, 0)).unwrap();
        assert!(same.data.max_abs_diff(&f.data) < 1e-15);
        let shifted = warp(&f, &FlowField::constant(4, 5, 0, 1.0, 0.0)).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let expect = if x + 1 < 5 { f.data.at3(c, y, x + 1) } else { 0.0 };
                    assert_eq!(shifted.data.at3(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn warp_and_upsample_gradients() {
        let mut r = rng(6);
        // Keep sample points away from integer grid lines.
        let flow = Tensor::from_fn(&[2, 4, 5], |i| 0.3 + 0.4 * ((i * 7 % 11) as f64 / 11.0) - 0.6 * ((i % 3) as f64));
        let inputs = vec![Tensor::randn(&[3, 4, 5], 1.0, &mut r), flow];
        let wts = Tensor::randn(&[3, 8, 10], 1.0, &mut r);
        let report = check_inputs_with(&inputs, 1e-6, 64, |g, v| {
            let w = warp_op(g, v[0], v[1]);
            let up = upsample_flow_op(g, w);
            let c = g.constant(wts.clone());
            let p = g.mul(up, c);
            g.sum(p)
        });
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn context_net_starts_as_identity() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let net = ContextNet::new(&mut store, "ctx", &mut r);
        let a = FlowField::new(Tensor::randn(&[2, 8, 8], 1.0, &mut r), 0).unwrap();
        let b = FlowField::new(Tensor::randn(&[2, 8, 8], 1.0, &mut r), 0).unwrap();
        let out = context_refine(&store, &net, &a, &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn flow_stage_parameter_gradients() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let head = FlowHead::new(&mut store, "h", 4 + 8 + DEPTH_FEATURES, true, &mut r);
        let m = DepthModulation::new(&mut store, "g", &mut r);
        let ctx = ContextNet::new(&mut store, "ctx", &mut r);
        // Give the zero-initialized last context layer a nonzero value so that
        // every context layer receives gradient.
        let last = ctx.layers[3].weight;
        *store.value_mut(last) = Tensor::randn(store.value(last).shape(), 0.1, &mut r);
        let feats = Tensor::randn(&[4, 4, 5], 1.0, &mut r);
        let cost = Tensor::randn(&[8, 4, 5], 1.0, &mut r);
        let depth = DepthMap::from_raw(5, 4, (0..20).map(|i| 2.0 + (i as f64 * 0.37).sin()).collect()).unwrap();
        let prev = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
        let target = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&store, &ids, |g, s| {
            let f = g.constant(feats.clone());
            let c = g.constant(cost.clone());
            let d = g.constant(depth.inverse_depth());
            let p = g.constant(prev.clone());
            let u = estimate_flow_op(g, s, &head, &m, f, c, d, Some(p));
            let u = ctx.forward(g, s, p, u);
            let t = g.constant(target.clone());
            let e = g.sub(u, t);
            let e = g.square(e);
            g.sum(e)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }
}
