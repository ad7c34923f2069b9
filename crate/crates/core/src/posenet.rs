//! Hierarchical residual pose regression with confidence-weighted fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::DepthMap;
use crate::geometry::{normalize_quaternion, Pose};
use crate::graph::{ConvLayout, Graph, Var};
use crate::nn::{Conv2d, Init, Linear, ParamStore};
use crate::pyramid::FeatureMap;
use crate::tensor::Tensor;

pub const HEAD_WIDTHS: [usize; 3] = [256, 128, 64];
pub const POOL_WIDTH: usize = 64;
pub const DROPOUT: f64 = 0.2;
pub const DEGENERATE_NORM: f64 = 1e-8;
/// Extra channels appended to the flow features: inverse depth and x/y coordinates.
pub const EXTRA_CHANNELS: usize = 3;

/// A pose at a pyramid level with its fusion logit.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub level: usize,
    pub confidence_logit: f64,
}

impl PoseEstimate {
    pub fn new(pose: Pose, level: usize, confidence_logit: f64) -> Self {
        Self {
            pose,
            level,
            confidence_logit,
        }
    }
}

/// Dropout configuration for one forward pass.
pub enum Dropout<'a> {
    Off,
    On(&'a mut dyn rand::RngCore),
}

/// Per-level head: spatial encoder, pooling, `(256,128,64)` MLP to a 7-vector,
/// and a confidence logit from the pooled features.
#[derive(Debug, Clone)]
pub struct PoseHead {
    pub in_channels: usize,
    pub encoder: [Conv2d; 2],
    pub fc: Vec<Linear>,
    pub out: Linear,
    pub confidence: Linear,
}

/// Graph outputs of one [`PoseHead`] pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[7]`: `(Δt, Δq)`.
    pub delta: Var,
    /// `[1]`.
    pub logit: Var,
}

impl PoseHead {
    /// `in_channels` counts flow features only; depth and coordinates are added here.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, rng: &mut R) -> Self {
        let s1 = ConvLayout::same(1, 1);
        let encoder = [
            Conv2d::new(store, &format!("{name}/enc0"), in_channels + EXTRA_CHANNELS, POOL_WIDTH, 1, s1, Init::He, rng),
            Conv2d::new(store, &format!("{name}/enc1"), POOL_WIDTH, POOL_WIDTH, 1, s1, Init::He, rng),
        ];
        let mut fc = Vec::new();
        let mut width = POOL_WIDTH + 7;
        for (i, &h) in HEAD_WIDTHS.iter().enumerate() {
            fc.push(Linear::new(store, &format!("{name}/fc{i}"), width, h, Init::He, rng));
            width = h;
        }
        Self {
            in_channels,
            encoder,
            fc,
            out: Linear::new(store, &format!("{name}/out"), width, 7, Init::Zero, rng),
            confidence: Linear::new(store, &format!("{name}/confidence"), POOL_WIDTH, 1, Init::Zero, rng),
        }
    }

    /// `features`: flow features `C×H×W`; `inv_depth`: `1×H×W`; `pose7`: `[7]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        inv_depth: Var,
        pose7: Var,
        dropout: &mut Dropout<'_>,
    ) -> HeadOutput {
        let (_, h, w) = g.value(features).dims3();
        let coords = g.constant(coordinate_channels(h, w));
        let mut x = g.concat(&[features, inv_depth, coords]);
        for conv in &self.encoder {
            x = conv.forward(g, store, x);
            x = g.leaky_relu(x);
        }
        let pooled = g.global_avg_pool(x);
        let pooled = g.reshape(pooled, &[1, POOL_WIDTH]);
        let logit = self.confidence.forward(g, store, pooled);
        let logit = g.reshape(logit, &[1]);
        let flat = g.reshape(pooled, &[POOL_WIDTH]);
        let h = g.concat(&[flat, pose7]);
        let mut h = g.reshape(h, &[1, POOL_WIDTH + 7]);
        for layer in &self.fc {
            h = layer.forward(g, store, h);
            h = g.leaky_relu(h);
            if let Dropout::On(rng) = dropout {
                let keep = 1.0 - DROPOUT;
                let n = g.value(h).len();
                let mask = Tensor::from_fn(&[1, n], |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                h = g.mul_const(h, mask);
            }
        }
        let delta = self.out.forward(g, store, h);
        let delta = g.reshape(delta, &[7]);
        HeadOutput { delta, logit }
    }
}

/// `2×H×W` pixel-centre coordinates scaled to `[-1, 1]`.
pub fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let hw = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let p = i % hw;
        if i < hw {
            (2.0 * (p % w) as f64 + 1.0) / w as f64 - 1.0
        } else {
            (2.0 * (p / w) as f64 + 1.0) / h as f64 - 1.0
        }
    })
}

/// A pose carried through the graph: `t` is `[3]`, `q` is a unit `[4]` with `w ≥ 0`.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub t: Var,
    pub q: Var,
}

impl PoseVars {
    pub fn constant(g: &mut Graph, pose: &Pose) -> Self {
        Self {
            t: g.constant(Tensor::from_vec(&[3], pose.t().to_vec())),
            q: g.constant(Tensor::from_vec(&[4], pose.q().to_vec())),
        }
    }

    pub fn vec7(&self, g: &mut Graph) -> Var {
        g.concat(&[self.t, self.q])
    }

    pub fn to_pose(&self, g: &Graph) -> Result<Pose> {
        let t = g.value(self.t).data();
        let q = g.value(self.q).data();
        Pose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
    }
}

/// Additive update in `(t, q)` followed by renormalization, inside the graph.
pub fn apply_residual_op(g: &mut Graph, pose: PoseVars, delta: Var) -> Result<PoseVars> {
    let dt = g.narrow(delta, 0, 3);
    let dq = g.narrow(delta, 3, 4);
    let t = g.add(pose.t, dt);
    let q = g.add(pose.q, dq);
    let n = g.value(q).norm();
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateUpdate(n));
    }
    let q = g.normalize_axis0(q, DEGENERATE_NORM);
    let q = g.canonical_sign(q);
    Ok(PoseVars { t, q })
}

/// `t' = t + Δt`, `q' = normalize(q + Δq)` with `w ≥ 0`; level moves one step finer.
pub fn apply_residual(estimate: &PoseEstimate, delta: &[f64; 7]) -> Result<PoseEstimate> {
    let t = estimate.pose.t();
    let q = estimate.pose.q();
    let qn = [q[0] + delta[3], q[1] + delta[4], q[2] + delta[5], q[3] + delta[6]];
    let norm = qn.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateUpdate(norm));
    }
    let q = normalize_quaternion(qn).ok_or(Error::DegenerateUpdate(norm))?;
    let pose = Pose::new(q, [t[0] + delta[0], t[1] + delta[1], t[2] + delta[2]])?;
    Ok(PoseEstimate::new(pose, estimate.level.saturating_sub(1), estimate.confidence_logit))
}

/// Residual for the estimate coming from the next coarser level, computed on
/// level `features.level`. Returns the 7-vector and the confidence logit.
pub fn residual_pose_update(
    store: &ParamStore,
    head: &PoseHead,
    features: &FeatureMap,
    depth: &DepthMap,
    estimate: &PoseEstimate,
) -> Result<([f64; 7], f64)> {
    if estimate.level != features.level + 1 {
        return Err(Error::InvalidInput(format!(
            "pose estimate at level {} cannot be refined on level {}",
            estimate.level, features.level
        )));
    }
    if depth.height() != features.height() || depth.width() != features.width() {
        return Err(Error::shape("depth and flow features differ in resolution"));
    }
    if features.channels() != head.in_channels {
        return Err(Error::shape(format!(
            "pose head expects {} feature channels, got {}",
            head.in_channels,
            features.channels()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features.data.clone());
    let d = g.constant(depth.inverse_depth());
    let p = g.constant(Tensor::from_vec(&[7], estimate.pose.to_vec7().to_vec()));
    let out = head.forward(&mut g, store, f, d, p, &mut Dropout::Off);
    let v = g.value(out.delta).data();
    let mut delta = [0.0; 7];
    delta.copy_from_slice(v);
    Ok((delta, g.value(out.logit).item()))
}

/// Softmax of the logits.
pub fn fusion_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Confidence-weighted average of poses in `(t, q)` space. Quaternions are
/// sign-aligned to the highest-weight estimate before averaging.
pub fn fuse_poses(estimates: &[PoseEstimate]) -> Result<Pose> {
    if estimates.is_empty() {
        return Err(Error::Empty("pose estimates"));
    }
    let logits: Vec<f64> = estimates.iter().map(|e| e.confidence_logit).collect();
    let w = fusion_weights(&logits);
    let best = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
    let qref = estimates[best].pose.q();
    let mut t = [0.0; 3];
    let mut q = [0.0; 4];
    for (e, wi) in estimates.iter().zip(&w) {
        let qi = e.pose.q();
        let dot: f64 = qi.iter().zip(&qref).map(|(a, b)| a * b).sum();
        let s = if dot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..3 {
            t[k] += wi * e.pose.t()[k];
        }
        for k in 0..4 {
            q[k] += wi * s * qi[k];
        }
    }
    Pose::new(q, t)
}

/// Runs the residual chain over levels given coarse to fine, starting from the
/// identity pose. Returns the per-level poses and logits as graph values.
pub fn pose_chain_op(
    g: &mut Graph,
    store: &ParamStore,
    heads: &[PoseHead],
    features: &[Var],
    inv_depths: &[Var],
    dropout: &mut Dropout<'_>,
) -> Result<Vec<(PoseVars, Var)>> {
    if features.len() != heads.len() || inv_depths.len() != heads.len() {
        return Err(Error::InvalidInput(format!(
            "{} pose heads, {} feature levels, {} depth levels",
            heads.len(),
            features.len(),
            inv_depths.len()
        )));
    }
    let mut pose = PoseVars::constant(g, &Pose::identity());
    let mut out = Vec::with_capacity(heads.len());
    for ((head, &f), &d) in heads.iter().zip(features).zip(inv_depths) {
        let p7 = pose.vec7(g);
        let h = head.forward(g, store, f, d, p7, dropout);
        pose = apply_residual_op(g, pose, h.delta)?;
        out.push((pose, h.logit));
    }
    Ok(out)
}

/// Coarse-to-fine estimation from per-level flow features and depth maps
/// (both ordered coarse to fine; `heads[i]` belongs to the i-th entry).
pub fn hierarchical_estimate(
    store: &ParamStore,
    heads: &[PoseHead],
    features: &[FeatureMap],
    depths: &[DepthMap],
) -> Result<(Pose, Vec<PoseEstimate>)> {
    if features.len() != heads.len() || depths.len() != heads.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} levels of features and depth, got {} and {}",
            heads.len(),
            features.len(),
            depths.len()
        )));
    }
    let coarsest = features.first().map(|f| f.level).ok_or(Error::Empty("pyramid levels"))?;
    let mut current = PoseEstimate::new(Pose::identity(), coarsest + 1, 0.0);
    let mut estimates = Vec::with_capacity(heads.len());
    for ((head, f), d) in heads.iter().zip(features).zip(depths) {
        let (delta, logit) = residual_pose_update(store, head, f, d, &current)?;
        current = apply_residual(&current, &delta)?;
        current.confidence_logit = logit;
        estimates.push(current.clone());
    }
    Ok((fuse_poses(&estimates)?, estimates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::pyramid::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, levels: usize, channels: usize) -> (ParamStore, Vec<PoseHead>, ChaCha8Rng) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let heads = (0..levels).map(|l| PoseHead::new(&mut store, &format!("pose{l}"), channels, &mut r)).collect();
        (store, heads, r)
    }

    fn level_inputs(r: &mut ChaCha8Rng, level: usize, c: usize, h: usize, w: usize) -> (FeatureMap, DepthMap) {
        let f = FeatureMap::new(Tensor::randn(&[c, h, w], 1.0, r), level, Modality::Fused).unwrap();
        let d = DepthMap::from_raw(w, h, (0..h * w).map(|_| r.gen_range(1.0..20.0)).collect()).unwrap();
        (f, d)
    }

    #[test]
    fn zero_init_residual_for_any_size() {
        let (store, heads, mut r) = setup(1, 1, 5);
        for (h, w) in [(1, 1), (3, 7), (8, 4)] {
            let (f, d) = level_inputs(&mut r, 0, 5, h, w);
            let est = PoseEstimate::new(Pose::identity(), 1, 0.0);
            let (delta, logit) = residual_pose_update(&store, &heads[0], &f, &d, &est).unwrap();
            assert_eq!(delta, [0.0; 7]);
            assert_eq!(logit, 0.0);
        }
        let (f, d) = level_inputs(&mut r, 0, 5, 2, 2);
        let wrong = PoseEstimate::new(Pose::identity(), 3, 0.0);
        assert!(residual_pose_update(&store, &heads[0], &f, &d, &wrong).is_err());
    }

    #[test]
    fn apply_residual_cases() {
        let id = PoseEstimate::new(Pose::identity(), 2, 0.5);
        let same = apply_residual(&id, &[0.0; 7]).unwrap();
        assert_eq!(same.pose, id.pose);
        assert_eq!(same.level, 1);
        let moved = apply_residual(&id, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(moved.pose.t(), [1.0, 0.0, 0.0]);
        assert_eq!(moved.pose.q(), [1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            apply_residual(&id, &[0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]),
            Err(Error::DegenerateUpdate(_))
        ));
        // Flipping through w < 0 comes back with the w ≥ 0 convention.
        let flip = apply_residual(&id, &[0.0, 0.0, 0.0, -1.5, 0.2, 0.0, 0.0]).unwrap();
        assert!(flip.pose.q()[0] >= 0.0);
    }

    #[test]
    fn graph_residual_matches_concrete() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose::from_axis_angle([0.3, -1.0, 0.2], 0.4, [1.0, 2.0, -0.5]).unwrap();
        let delta: [f64; 7] = std::array::from_fn(|_| r.gen_range(-0.1..0.1));
        let expect = apply_residual(&PoseEstimate::new(pose.clone(), 1, 0.0), &delta).unwrap();
        let mut g = Graph::new();
        let pv = PoseVars::constant(&mut g, &pose);
        let d = g.constant(Tensor::from_vec(&[7], delta.to_vec()));
        let got = apply_residual_op(&mut g, pv, d).unwrap().to_pose(&g).unwrap();
        assert!(got.distance_max(&expect.pose) < 1e-12);
    }

    #[test]
    fn fusion_cases() {
        let a = Pose::from_axis_angle([0.0, 1.0, 0.0], 0.1, [1.0, 0.0, 0.0]).unwrap();
        let single = fuse_poses(&[PoseEstimate::new(a.clone(), 0, 3.0)]).unwrap();
        assert_eq!(single, a);
        let same = fuse_poses(&[PoseEstimate::new(a.clone(), 0, -2.0), PoseEstimate::new(a.clone(), 1, 5.0)]).unwrap();
        assert!(same.distance_max(&a) < 1e-12);
        assert!(fuse_poses(&[]).is_err());
        let w = fusion_weights(&[1.0, -3.0, 0.5, 2.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_init_chain_is_identity() {
        let (store, heads, mut r) = setup(4, 4, 3);
        let mut feats = Vec::new();
        let mut depths = Vec::new();
        for (i, level) in (0..4).rev().enumerate() {
            let s = 1 << i;
            let (f, d) = level_inputs(&mut r, level, 3, 2 * s, 4 * s);
            feats.push(f);
            depths.push(d);
        }
        let (fused, est) = hierarchical_estimate(&store, &heads, &feats, &depths).unwrap();
        assert_eq!(est.len(), 4);
        assert_eq!(est.iter().map(|e| e.level).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
        for e in &est {
            assert_eq!(e.pose, Pose::identity());
        }
        assert_eq!(fused, Pose::identity());
        assert!(hierarchical_estimate(&store, &heads, &feats[..3], &depths[..3]).is_err());
    }

    #[test]
    fn head_parameter_gradients() {
        let (mut store, heads, mut r) = setup(5, 1, 4);
        // Move off the zero-initialized output so upstream layers see gradient.
        for id in [heads[0].out.weight, heads[0].confidence.weight] {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::randn(&shape, 0.1, &mut r);
        }
        let feats = Tensor::randn(&[4, 3, 4], 1.0, &mut r);
        let inv = Tensor::uniform(&[1, 3, 4], 1.0, &mut r).map(f64::abs);
        let p7 = Tensor::randn(&[7], 1.0, &mut r);
        let target = Tensor::randn(&[7], 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let head = heads[0].clone();
        let report = check_params(&store, &ids, |g, s| {
            let f = g.constant(feats.clone());
            let d = g.constant(inv.clone());
            let p = g.constant(p7.clone());
            let o = head.forward(g, s, f, d, p, &mut Dropout::Off);
            let t = g.constant(target.clone());
            let e = g.sub(o.delta, t);
            let e = g.square(e);
            let l = g.sum(e);
            let c = g.square(o.logit);
            g.add(l, c)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn dropout_is_seeded() {
        let (mut store, heads, mut r) = setup(6, 1, 2);
        let id = heads[0].out.weight;
        *store.value_mut(id) = Tensor::randn(&[64, 7], 0.1, &mut r);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let f = g.constant(Tensor::full(&[2, 2, 2], 0.3));
            let d = g.constant(Tensor::full(&[1, 2, 2], 0.1));
            let p = g.constant(Tensor::zeros(&[7]));
            let mut dr = ChaCha8Rng::seed_from_u64(seed);
            let o = heads[0].forward(&mut g, &store, f, d, p, &mut Dropout::On(&mut dr));
            g.value(o.delta).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
