//! Full two-frame model: RGB-D pyramid, per-level cost volume and flow,
//! residual pose chain, and the learnable loss balance parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costvol::{cost_volume_op, CostEncoder, DEFAULT_SEARCH_RADIUS, ENCODER_OUT, NORM_EPS};
use crate::error::{Error, Result};
use crate::flow::{gated_flow_op, upsample_flow_op, warp_op, ContextNet, DepthMap, DepthModulation, FlowField, FlowHead, DEPTH_FEATURES};
use crate::geometry::Pose;
use crate::graph::{Graph, Var};
use crate::loss::{total_loss_op, DEFAULT_S_Q, DEFAULT_S_T};
use crate::nn::{ParamId, ParamStore};
use crate::posenet::{fuse_poses, pose_chain_op, Dropout, PoseEstimate, PoseHead, PoseVars};
use crate::pyramid::{FeaturePyramid, DEFAULT_WIDTHS, LEVELS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; LEVELS],
    pub search_radius: usize,
    /// When false the depth channel and all depth maps are zeroed (RGB-only ablation).
    pub use_depth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            search_radius: DEFAULT_SEARCH_RADIUS,
            use_depth: true,
        }
    }
}

/// Network inputs for one frame pair.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub rgbd1: Tensor,
    pub rgbd2: Tensor,
    /// Inverse depth of the first frame per pyramid level (level 0 first).
    pub inv_depth: Vec<Tensor>,
}

impl PairInput {
    /// `rgb*` are `3×H×W` in `[0, 1]`; depths are dense maps at full resolution.
    pub fn new(rgb1: &Tensor, depth1: &DepthMap, rgb2: &Tensor, depth2: &DepthMap, use_depth: bool) -> Result<Self> {
        let rgbd1 = stack_rgbd(rgb1, depth1, use_depth)?;
        let rgbd2 = stack_rgbd(rgb2, depth2, use_depth)?;
        if rgbd1.shape() != rgbd2.shape() {
            return Err(Error::shape("frames of a pair differ in size"));
        }
        FeaturePyramid::check_input(rgbd1.shape())?;
        let inv_depth = (0..LEVELS)
            .map(|l| {
                let d = depth1.downsample(1 << (l + 1))?;
                Ok(if use_depth {
                    d.inverse_depth()
                } else {
                    Tensor::zeros(&[1, d.height(), d.width()])
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rgbd1, rgbd2, inv_depth })
    }

    pub fn height(&self) -> usize {
        self.rgbd1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgbd1.shape()[2]
    }
}

fn stack_rgbd(rgb: &Tensor, depth: &DepthMap, use_depth: bool) -> Result<Tensor> {
    if rgb.rank() != 3 || rgb.shape()[0] != 3 {
        return Err(Error::shape(format!("RGB image must be 3×H×W, got {:?}", rgb.shape())));
    }
    let (_, h, w) = rgb.dims3();
    if depth.height() != h || depth.width() != w {
        return Err(Error::shape("depth map and image differ in size"));
    }
    let inv = if use_depth {
        depth.inverse_depth()
    } else {
        Tensor::zeros(&[1, h, w])
    };
    Ok(Tensor::concat0(&[rgb, &inv]))
}

/// Graph handles of one forward pass; per-level vectors are ordered coarse to fine.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub flows: Vec<Var>,
    pub poses: Vec<PoseVars>,
    pub logits: Vec<Var>,
}

/// Concrete outputs of inference on one pair.
#[derive(Debug, Clone)]
pub struct Inference {
    pub fused: Pose,
    pub estimates: Vec<PoseEstimate>,
    pub flows: Vec<FlowField>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub pyramid: FeaturePyramid,
    /// Per-level modules, indexed by level (0 finest).
    pub encoders: Vec<CostEncoder>,
    pub modulation: Vec<DepthModulation>,
    pub flow_heads: Vec<FlowHead>,
    pub pose_heads: Vec<PoseHead>,
    pub context: ContextNet,
    pub s_t: ParamId,
    pub s_q: ParamId,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        if config.widths.iter().any(|w| *w < 4 || w % 4 != 0) {
            return Err(Error::Config(format!("channel widths must be positive multiples of 4, got {:?}", config.widths)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pyramid = FeaturePyramid::new(&mut store, "pyramid", config.widths, &mut rng);
        let mut encoders = Vec::new();
        let mut modulation = Vec::new();
        let mut flow_heads = Vec::new();
        let mut pose_heads = Vec::new();
        for l in 0..LEVELS {
            let coarsest = l + 1 == LEVELS;
            encoders.push(CostEncoder::new(&mut store, &format!("cost/l{l}"), config.search_radius, &mut rng));
            modulation.push(DepthModulation::new(&mut store, &format!("modulation/l{l}"), &mut rng));
            let head_in = config.widths[l] + ENCODER_OUT + DEPTH_FEATURES;
            flow_heads.push(FlowHead::new(&mut store, &format!("flow/l{l}"), head_in, !coarsest, &mut rng));
            pose_heads.push(PoseHead::new(&mut store, &format!("pose/l{l}"), 2 + ENCODER_OUT + DEPTH_FEATURES, &mut rng));
        }
        let context = ContextNet::new(&mut store, "context", &mut rng);
        let s_t = store.register("loss/s_t", Tensor::scalar(DEFAULT_S_T));
        let s_q = store.register("loss/s_q", Tensor::scalar(DEFAULT_S_Q));
        Ok((
            Self {
                config,
                pyramid,
                encoders,
                modulation,
                flow_heads,
                pose_heads,
                context,
                s_t,
                s_q,
            },
            store,
        ))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PairInput, dropout: &mut Dropout<'_>) -> Result<ForwardVars> {
        FeaturePyramid::check_input(input.rgbd1.shape())?;
        if input.rgbd2.shape() != input.rgbd1.shape() || input.inv_depth.len() != LEVELS {
            return Err(Error::shape("malformed pair input"));
        }
        let x1 = g.constant(input.rgbd1.clone());
        let x2 = g.constant(input.rgbd2.clone());
        let p1 = self.pyramid.forward(g, store, x1);
        let p2 = self.pyramid.forward(g, store, x2);
        let s = self.config.search_radius;

        let mut flows = Vec::with_capacity(LEVELS);
        let mut pose_features = Vec::with_capacity(LEVELS);
        let mut depths = Vec::with_capacity(LEVELS);
        let mut prev: Option<Var> = None;
        for l in (0..LEVELS).rev() {
            let f1 = p1.fused[l];
            let up = prev.map(|u| upsample_flow_op(g, u));
            let f2 = match up {
                Some(u) => warp_op(g, p2.fused[l], u),
                None => p2.fused[l],
            };
            let n1 = g.normalize_axis0(f1, NORM_EPS);
            let n2 = g.normalize_axis0(f2, NORM_EPS);
            let cost = cost_volume_op(g, n1, n2, s);
            let cost_feats = self.encoders[l].forward(g, store, cost);
            let inv = g.constant(input.inv_depth[l].clone());
            let (depth_feats, gate) = self.modulation[l].forward(g, store, inv);
            let gated = gated_flow_op(g, store, &self.flow_heads[l], f1, cost_feats, depth_feats, gate, up);
            let mut u = match up {
                Some(u) => g.add(u, gated),
                None => gated,
            };
            if l == 0 {
                let init = up.unwrap_or(u);
                u = self.context.forward(g, store, init, u);
            }
            pose_features.push(g.concat(&[u, cost_feats, depth_feats]));
            depths.push(inv);
            flows.push(u);
            prev = Some(u);
        }
        let heads: Vec<PoseHead> = (0..LEVELS).rev().map(|l| self.pose_heads[l].clone()).collect();
        let chain = pose_chain_op(g, store, &heads, &pose_features, &depths, dropout)?;
        Ok(ForwardVars {
            flows,
            poses: chain.iter().map(|(p, _)| *p).collect(),
            logits: chain.iter().map(|(_, l)| *l).collect(),
        })
    }

    /// Weighted per-level loss; `alpha` is ordered coarse to fine.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, out: &ForwardVars, gt: &Pose, alpha: &[f64]) -> Result<Var> {
        let s_t = g.param(store, self.s_t);
        let s_q = g.param(store, self.s_q);
        total_loss_op(g, &out.poses, gt, alpha, s_t, s_q)
    }

    pub fn infer(&self, store: &ParamStore, input: &PairInput) -> Result<Inference> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, input, &mut Dropout::Off)?;
        let mut estimates = Vec::with_capacity(LEVELS);
        let mut flows = Vec::with_capacity(LEVELS);
        for (i, ((p, logit), u)) in out.poses.iter().zip(&out.logits).zip(&out.flows).enumerate() {
            let level = LEVELS - 1 - i;
            estimates.push(PoseEstimate::new(p.to_pose(&g)?, level, g.value(*logit).item()));
            flows.push(FlowField::new(g.value(*u).clone(), level)?);
        }
        Ok(Inference {
            fused: fuse_poses(&estimates)?,
            estimates,
            flows,
        })
    }

    /// Current loss balance parameters `(s_t, s_q)`.
    pub fn balance(&self, store: &ParamStore) -> (f64, f64) {
        (store.value(self.s_t).item(), store.value(self.s_q).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::DEFAULT_ALPHA;
    use rand::Rng;

    fn pair(seed: u64, use_depth: bool) -> PairInput {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (32, 64);
        let rgb1 = Tensor::uniform(&[3, h, w], 0.5, &mut r).map(|v| v + 0.5);
        let rgb2 = Tensor::uniform(&[3, h, w], 0.5, &mut r).map(|v| v + 0.5);
        let d: Vec<f64> = (0..h * w).map(|_| r.gen_range(2.0..20.0)).collect();
        let dm = DepthMap::from_raw(w, h, d).unwrap();
        PairInput::new(&rgb1, &dm, &rgb2, &dm, use_depth).unwrap()
    }

    #[test]
    fn initial_model_predicts_identity() {
        let (model, store) = Model::new(ModelConfig::default(), 1).unwrap();
        let inf = model.infer(&store, &pair(2, true)).unwrap();
        assert_eq!(inf.estimates.len(), LEVELS);
        assert_eq!(inf.fused, Pose::identity());
        let sizes: Vec<_> = inf.flows.iter().map(|f| (f.height(), f.width())).collect();
        assert_eq!(sizes, vec![(2, 4), (4, 8), (8, 16), (16, 32)]);
    }

    #[test]
    fn loss_backpropagates_to_all_modules() {
        let (model, mut store) = Model::new(ModelConfig::default(), 3).unwrap();
        // Leave the zero-initialized pose outputs so that gradient reaches the
        // flow and pyramid parameters.
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for h in &model.pose_heads {
            let id = h.out.weight;
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::randn(&shape, 0.05, &mut r);
        }
        let input = pair(5, true);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &input, &mut Dropout::Off).unwrap();
        let gt = Pose::from_translation([0.0, 0.0, 1.0]).unwrap();
        let loss = model.loss(&mut g, &store, &out, &gt, &DEFAULT_ALPHA).unwrap();
        assert!(g.value(loss).item().is_finite());
        let grads = g.backward(loss);
        for prefix in ["pyramid/rgb/l0", "pyramid/depth/l3", "cost/l0", "flow/l3", "pose/l0", "loss/s_t"] {
            let touched = store
                .iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .any(|(id, _, _)| grads.param(id).is_some_and(|t| t.norm() > 0.0));
            assert!(touched, "no gradient for {prefix}");
        }
    }

    #[test]
    fn rgb_only_input_has_no_depth() {
        let p = pair(6, false);
        assert!(p.rgbd1.narrow0(3, 1).data().iter().all(|v| *v == 0.0));
        assert!(p.inv_depth.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }
}
