//! Built-in oracle suites with optional fault injection.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::model_hash;
use crate::costvol::{compute_cost_volume, normalize_features, CostEncoder, CostVolume};
use crate::evalkit::{aggregate, segment_errors};
use crate::flow::{ContextNet, DepthModulation, FlowHead, DEPTH_FEATURES};
use crate::geometry::{accumulate, compose, relative, Matrix4, Pose, Trajectory};
use crate::gradcheck::{check_inputs, check_params, GradReport};
use crate::graph::{Graph, Var};
use crate::loss::{level_loss, level_loss_op, total_loss, LossParams};
use crate::network::{Model, ModelConfig, PairInput};
use crate::nn::{ParamId, ParamStore};
use crate::posenet::{fusion_weights, Dropout, PoseEstimate, PoseHead};
use crate::pyramid::{ChannelAttention, CrossAttention, FeatureMap, Modality, SpatialAttention};
use crate::flow::DepthMap;
use crate::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-4;
pub const COST_TOL: f64 = 1e-5;
pub const POSE_TOL: f64 = 1e-9;

/// Deliberate defects used to confirm that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Reverses the channel order of the computed cost volume.
    PermuteCostChannels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let width = self.suites.iter().map(|s| s.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for s in &self.suites {
            let _ = writeln!(out, "{:<width$}  {}  {}", s.name, if s.passed { "PASS" } else { "FAIL" }, s.detail);
        }
        let _ = writeln!(out, "{}", if self.passed() { "all suites passed" } else { "FAILED" });
        out
    }
}

pub fn run(seed: u64, fault: Fault) -> Report {
    let suites = vec![
        cost_volume_suite(seed, fault),
        gradient_suite(seed),
        pose_algebra_suite(seed),
        loss_suite(seed),
        metric_suite(seed),
        checkpoint_suite(seed),
    ];
    Report { suites }
}

/// Direct five-loop correlation used as the reference.
pub fn cost_volume_oracle(f1: &Tensor, f2: &Tensor, s: usize) -> Tensor {
    let (c, h, w) = f1.dims3();
    let side = 2 * s + 1;
    let si = s as isize;
    let mut out = Tensor::zeros(&[side * side, h, w]);
    for dy in -si..=si {
        for dx in -si..=si {
            let k = ((dy + si) * side as isize + dx + si) as usize;
            for y in 0..h {
                for x in 0..w {
                    let (x2, y2) = (x as isize + dx, y as isize + dy);
                    if x2 < 0 || y2 < 0 || x2 >= w as isize || y2 >= h as isize {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += f1.at3(ch, y, x) * f2.at3(ch, y2 as usize, x2 as usize);
                    }
                    out.set3(k, y, x, acc);
                }
            }
        }
    }
    out
}

fn cost_volume_suite(seed: u64, fault: Fault) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x01);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for s in [0usize, 2, 4] {
        let mk = |r: &mut ChaCha8Rng| normalize_features(&FeatureMap::new(Tensor::randn(&[4, 8, 8], 1.0, r), 0, Modality::Fused).expect("valid"));
        let (a, b) = (mk(&mut r), mk(&mut r));
        let Ok(mut cv) = compute_cost_volume(&a, &b, s as i64) else {
            ok = false;
            continue;
        };
        if fault == Fault::PermuteCostChannels {
            let n = CostVolume::channels_for(s);
            let parts: Vec<Tensor> = (0..n).rev().map(|k| cv.data.narrow0(k, 1)).collect();
            cv.data = Tensor::concat0(&parts.iter().collect::<Vec<_>>());
        }
        let oracle = cost_volume_oracle(&a.data, &b.data, s);
        let err = if cv.data.shape() == oracle.shape() { cv.data.max_abs_diff(&oracle) } else { f64::INFINITY };
        worst = worst.max(err);
        ok &= err < COST_TOL;
    }
    SuiteResult {
        name: "cost_volume",
        passed: ok,
        detail: format!("max abs error {worst:.3e} over S in {{0,2,4}}"),
    }
}

fn weighted_sum(g: &mut Graph, y: Var, target: &Tensor) -> Var {
    let t = g.constant(target.clone());
    let p = g.mul(y, t);
    g.sum(p)
}

fn perturb(store: &mut ParamStore, ids: &[ParamId], std: f64, r: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, std, r);
    }
}

fn gradient_suite(seed: u64) -> SuiteResult {
    let mut reports: Vec<(&str, GradReport)> = Vec::new();
    for inst in 0..3u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (0x100 + inst));
        reports.extend(gradient_instance(&mut r));
    }
    let (name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("non-empty");
    SuiteResult {
        name: "gradients",
        passed: reports.iter().all(|(_, rep)| rep.passes(GRAD_TOL)),
        detail: format!("{} checks, worst {:.3e} ({name}: {})", reports.len(), worst.max_rel_error, worst.worst),
    }
}

fn gradient_instance(r: &mut ChaCha8Rng) -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let (c, h, w) = (4, 3, 4);
    let xr = Tensor::randn(&[c, h, w], 1.0, r);
    let xd = Tensor::randn(&[c, h, w], 1.0, r);
    let target = Tensor::randn(&[c, h, w], 1.0, r);

    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", c, r);
    let sa = SpatialAttention::new(&mut store, "sa", r);
    let xa = CrossAttention::new(&mut store, "xa", c, r);
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "attention",
        check_params(&store, &ids, |g, s| {
            let a = g.constant(xr.clone());
            let b = g.constant(xd.clone());
            let o1 = ca.forward(g, s, a);
            let o2 = sa.forward(g, s, b);
            let o3 = xa.forward(g, s, a, b);
            let sum = g.add(o1, o2);
            let sum = g.add(sum, o3);
            weighted_sum(g, sum, &target)
        }),
    ));

    let mut store = ParamStore::new();
    let enc = CostEncoder::new(&mut store, "enc", 1, r);
    let cost = Tensor::randn(&[9, h, w], 1.0, r);
    let enc_target = Tensor::randn(&[crate::costvol::ENCODER_OUT, h, w], 1.0, r);
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "cost_encoder",
        check_params(&store, &ids, |g, s| {
            let x = g.constant(cost.clone());
            let y = enc.forward(g, s, x);
            weighted_sum(g, y, &enc_target)
        }),
    ));

    let inv = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0.05..1.0));
    let mut store = ParamStore::new();
    let m = DepthModulation::new(&mut store, "g", r);
    let (ft, gt) = (Tensor::randn(&[DEPTH_FEATURES, h, w], 1.0, r), Tensor::randn(&[1, h, w], 1.0, r));
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "depth_modulation",
        check_params(&store, &ids, |g, s| {
            let d = g.constant(inv.clone());
            let (f, gate) = m.forward(g, s, d);
            let a = weighted_sum(g, f, &ft);
            let b = weighted_sum(g, gate, &gt);
            g.add(a, b)
        }),
    ));

    let mut store = ParamStore::new();
    let head = FlowHead::new(&mut store, "h", 6, true, r);
    let (fin, prev) = (Tensor::randn(&[6, h, w], 1.0, r), Tensor::randn(&[2, h, w], 1.0, r));
    let (rt, ht) = (Tensor::randn(&[2, h, w], 1.0, r), Tensor::randn(&[crate::flow::HEAD_WIDTHS[1], h, w], 1.0, r));
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "flow_head",
        check_params(&store, &ids, |g, s| {
            let x = g.constant(fin.clone());
            let p = g.constant(prev.clone());
            let (raw, hidden) = head.forward(g, s, &[x, p]);
            let a = weighted_sum(g, raw, &rt);
            let b = weighted_sum(g, hidden, &ht);
            g.add(a, b)
        }),
    ));

    let mut store = ParamStore::new();
    let ctx = ContextNet::new(&mut store, "ctx", r);
    let last = ctx.layers[ctx.layers.len() - 1].weight;
    perturb(&mut store, &[last], 0.1, r);
    let (u0, u1, ut) = (Tensor::randn(&[2, h, w], 1.0, r), Tensor::randn(&[2, h, w], 1.0, r), Tensor::randn(&[2, h, w], 1.0, r));
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "context_net",
        check_params(&store, &ids, |g, s| {
            let a = g.constant(u0.clone());
            let b = g.constant(u1.clone());
            let y = ctx.forward(g, s, a, b);
            weighted_sum(g, y, &ut)
        }),
    ));

    let mut store = ParamStore::new();
    let ph = PoseHead::new(&mut store, "pose", c, r);
    perturb(&mut store, &[ph.out.weight, ph.confidence.weight], 0.1, r);
    let p7 = Tensor::randn(&[7], 1.0, r);
    let (dt, lt) = (Tensor::randn(&[7], 1.0, r), Tensor::randn(&[1], 1.0, r));
    let inv_small = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0.05..1.0));
    let ids: Vec<_> = store.ids().collect();
    out.push((
        "pose_head",
        check_params(&store, &ids, |g, s| {
            let f = g.constant(xr.clone());
            let d = g.constant(inv_small.clone());
            let p = g.constant(p7.clone());
            let o = ph.forward(g, s, f, d, p, &mut Dropout::Off);
            let a = weighted_sum(g, o.delta, &dt);
            let b = weighted_sum(g, o.logit, &lt);
            g.add(a, b)
        }),
    ));

    let gt_pose = random_pose(r, 0.5);
    let inputs = vec![
        Tensor::from_fn(&[3], |_| r.gen_range(-2.0..2.0)),
        Tensor::from_fn(&[4], |_| r.gen_range(0.1..1.0)),
        Tensor::scalar(r.gen_range(-1.0..1.0)),
        Tensor::scalar(r.gen_range(-3.0..0.0)),
    ];
    out.push((
        "loss",
        check_inputs(&inputs, |g, v| level_loss_op(g, v[0], v[1], &gt_pose, v[2], v[3]).expect("non-degenerate")),
    ));
    out
}

pub fn random_pose(r: &mut ChaCha8Rng, max_angle: f64) -> Pose {
    let axis = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
    let axis = if axis.iter().all(|v: &f64| v.abs() < 1e-3) { [0.0, 0.0, 1.0] } else { axis };
    let t = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)];
    Pose::from_axis_angle(axis, r.gen_range(-max_angle..max_angle), t).expect("finite")
}

/// Homogeneous matrix written out from the quaternion formula.
pub fn matrix_oracle(p: &Pose) -> Matrix4 {
    let [w, x, y, z] = p.q();
    let t = p.t();
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), t[0]],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), t[1]],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn matmul4(a: &Matrix4, b: &Matrix4) -> Matrix4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Rigid inverse `[Rᵀ | −Rᵀt]`.
pub fn invert4(a: &Matrix4) -> Matrix4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
        m[i][3] = -(0..3).map(|k| a[k][i] * a[k][3]).sum::<f64>();
    }
    m[3][3] = 1.0;
    m
}

pub fn matrix_distance(a: &Matrix4, b: &Matrix4) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pose_algebra_suite(seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x03);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b, c) = (random_pose(&mut r, 3.0), random_pose(&mut r, 3.0), random_pose(&mut r, 3.0));
        let (ma, mb, mc) = (matrix_oracle(&a), matrix_oracle(&b), matrix_oracle(&c));
        let ab = compose(&a, &b).expect("valid");
        worst = worst.max(matrix_distance(&matrix_oracle(&ab), &matmul4(&ma, &mb)));
        let rel = relative(&a, &b).expect("valid");
        worst = worst.max(matrix_distance(&matrix_oracle(&rel), &matmul4(&invert4(&ma), &mb)));
        let traj = accumulate(&[b, c], a).expect("valid");
        let end = matmul4(&matmul4(&ma, &mb), &mc);
        worst = worst.max(matrix_distance(&matrix_oracle(&traj.poses()[2]), &end));
        let back = compose(&a, &rel).expect("valid");
        worst = worst.max(matrix_distance(&matrix_oracle(&back), &mb));
    }
    let mut wsum_err: f64 = 0.0;
    for n in 1..=8 {
        let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-20.0..20.0)).collect();
        wsum_err = wsum_err.max((fusion_weights(&logits).iter().sum::<f64>() - 1.0).abs());
    }
    SuiteResult {
        name: "pose_algebra",
        passed: worst < POSE_TOL && wsum_err < POSE_TOL,
        detail: format!("matrix error {worst:.3e}, fusion weight sum error {wsum_err:.3e}"),
    }
}

fn loss_suite(seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x04);
    let mut ok = true;
    let mut lin_err: f64 = 0.0;
    for _ in 0..20 {
        let gt = random_pose(&mut r, 1.0);
        let (st, sq) = (r.gen_range(-3.0..3.0), r.gen_range(-5.0..1.0));
        let perfect = level_loss(gt.t(), gt.q(), gt.t(), gt.q(), st, sq).expect("valid");
        ok &= perfect == st + sq;
        let est: Vec<PoseEstimate> = (0..4).map(|l| PoseEstimate::new(random_pose(&mut r, 1.0), l, 0.0)).collect();
        let a1: Vec<f64> = (0..4).map(|_| r.gen_range(0.1..2.0)).collect();
        let a2: Vec<f64> = (0..4).map(|_| r.gen_range(0.1..2.0)).collect();
        let (k1, k2) = (r.gen_range(0.1..3.0), r.gen_range(0.1..3.0));
        let mix: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| k1 * x + k2 * y).collect();
        let l = |alpha: &[f64]| total_loss(&est, &gt, &LossParams { s_t: st, s_q: sq, alpha: alpha.to_vec() }).expect("valid");
        lin_err = lin_err.max((l(&mix) - (k1 * l(&a1) + k2 * l(&a2))).abs());
    }
    SuiteResult {
        name: "loss_identities",
        passed: ok && lin_err < 1e-12,
        detail: format!("perfect prediction exact: {ok}, linearity error {lin_err:.3e}"),
    }
}

fn metric_suite(seed: u64) -> SuiteResult {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x05);
    let mut poses = vec![Pose::identity()];
    for _ in 0..300 {
        let step = Pose::from_axis_angle([0.0, 1.0, 0.0], r.gen_range(-0.02..0.02), [r.gen_range(-0.1..0.1), 0.0, r.gen_range(0.8..1.2)]).expect("finite");
        poses.push(compose(poses.last().expect("non-empty"), &step).expect("valid"));
    }
    let gt = Trajectory::new(poses).expect("non-empty");
    let lengths = [50.0, 100.0, 200.0];
    let self_err = aggregate(&segment_errors(&gt, &gt, &lengths).expect("same length")).expect("long enough");
    let noisy = Trajectory::new(
        gt.poses()
            .iter()
            .map(|p| compose(p, &random_pose(&mut r, 0.01)).expect("valid"))
            .collect(),
    )
    .expect("non-empty");
    let base = segment_errors(&gt, &noisy, &lengths).expect("same length");
    let g = random_pose(&mut r, 3.0);
    let moved = segment_errors(&gt, &noisy.transformed(&g).expect("valid"), &lengths).expect("same length");
    let inv_err = base
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a.t_err - b.t_err).abs().max((a.r_err - b.r_err).abs()))
        .fold(0.0, f64::max);
    let line = |s: f64| Trajectory::new((0..301).map(|i| Pose::from_translation([0.0, 0.0, s * i as f64]).expect("finite")).collect()).expect("non-empty");
    let s = 0.93;
    let (t_rel, _) = aggregate(&segment_errors(&line(1.0), &line(s), &[100.0, 200.0]).expect("same length")).expect("long enough");
    let scale_err = (t_rel - (1.0 - s) * 100.0).abs();
    SuiteResult {
        name: "metric_protocol",
        passed: self_err == (0.0, 0.0) && inv_err < 1e-9 && scale_err < 1e-6,
        detail: format!("self {self_err:?}, rigid invariance {inv_err:.3e}, scale error {scale_err:.3e}"),
    }
}

fn checkpoint_suite(seed: u64) -> SuiteResult {
    let cfg = ModelConfig {
        widths: [4, 8, 8, 8],
        search_radius: 1,
        use_depth: true,
    };
    let run = || -> crate::Result<bool> {
        let (model, mut store) = Model::new(cfg.clone(), seed)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x06);
        let ids: Vec<_> = model.pose_heads.iter().map(|h| h.out.weight).collect();
        perturb(&mut store, &ids, 0.05, &mut r);
        let rgb = (Tensor::uniform(&[3, 16, 32], 0.5, &mut r).map(|v| v + 0.5), Tensor::uniform(&[3, 16, 32], 0.5, &mut r).map(|v| v + 0.5));
        let depth = DepthMap::from_raw(32, 16, (0..512).map(|_| r.gen_range(2.0..30.0)).collect())?;
        let input = PairInput::new(&rgb.0, &depth, &rgb.1, &depth, true)?;
        let before = model.infer(&store, &input)?;
        let bytes = Checkpoint::from_store(&store, model_hash(&cfg)).to_bytes();
        let (model2, mut store2) = Model::new(cfg.clone(), seed.wrapping_add(1))?;
        Checkpoint::from_bytes(&bytes)?.restore(&mut store2, model_hash(&cfg))?;
        let after = model2.infer(&store2, &input)?;
        let same_flow = before.flows.iter().zip(&after.flows).all(|(a, b)| a.data.data() == b.data.data());
        Ok(before.fused == after.fused && same_flow && store == store2)
    };
    let (passed, detail) = match run() {
        Ok(true) => (true, "bit-identical outputs after reload".to_string()),
        Ok(false) => (false, "outputs differ after reload".to_string()),
        Err(e) => (false, e.to_string()),
    };
    SuiteResult {
        name: "checkpoint",
        passed,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_fault_is_caught() {
        let clean = run(11, Fault::None);
        assert!(clean.passed(), "{}", clean.table());
        let faulty = run(11, Fault::PermuteCostChannels);
        assert!(!faulty.passed());
        assert!(!faulty.suites[0].passed && faulty.suites[1..].iter().all(|s| s.passed));
        assert_eq!(run(11, Fault::None).table(), clean.table());
    }
}
