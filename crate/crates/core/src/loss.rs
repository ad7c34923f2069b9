//! Uncertainty-weighted pose loss summed over pyramid levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_quaternion, Pose};
use crate::graph::{Graph, Var};
use crate::posenet::{PoseEstimate, PoseVars};
use crate::tensor::Tensor;

pub const DEFAULT_S_T: f64 = 0.0;
pub const DEFAULT_S_Q: f64 = -2.5;
/// Per-level weights, coarse to fine.
pub const DEFAULT_ALPHA: [f64; 4] = [1.6, 0.8, 0.4, 0.2];
pub const MIN_QUAT_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub s_t: f64,
    pub s_q: f64,
    pub alpha: Vec<f64>,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            s_t: DEFAULT_S_T,
            s_q: DEFAULT_S_Q,
            alpha: DEFAULT_ALPHA.to_vec(),
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || !self.alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(Error::Config(format!("loss weights must be positive, got {:?}", self.alpha)));
        }
        if !self.s_t.is_finite() || !self.s_q.is_finite() {
            return Err(Error::Config("loss balance parameters must be finite".into()));
        }
        Ok(())
    }
}

fn unit_canonical(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > MIN_QUAT_NORM) {
        return Err(Error::InvalidInput(format!("quaternion norm {n:e} too small")));
    }
    normalize_quaternion(q).ok_or_else(|| Error::InvalidInput("non-finite quaternion".into()))
}

/// `‖t_gt − t‖₁·e^{−s_t} + s_t + ‖q̂_gt − q̂‖²·e^{−s_q} + s_q`, unit quaternions with `w ≥ 0`.
pub fn level_loss(t_pred: [f64; 3], q_pred: [f64; 4], t_gt: [f64; 3], q_gt: [f64; 4], s_t: f64, s_q: f64) -> Result<f64> {
    let qp = unit_canonical(q_pred)?;
    let qg = unit_canonical(q_gt)?;
    let lt: f64 = t_gt.iter().zip(&t_pred).map(|(a, b)| (a - b).abs()).sum();
    let lq: f64 = qg.iter().zip(&qp).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(lt * (-s_t).exp() + s_t + lq * (-s_q).exp() + s_q)
}

/// `Σ αˡ ℓˡ` over per-level estimates (same order as `params.alpha`).
pub fn total_loss(estimates: &[PoseEstimate], gt: &Pose, params: &LossParams) -> Result<f64> {
    if estimates.len() != params.alpha.len() {
        return Err(Error::InvalidInput(format!(
            "{} level estimates for {} loss weights",
            estimates.len(),
            params.alpha.len()
        )));
    }
    let mut total = 0.0;
    for (e, a) in estimates.iter().zip(&params.alpha) {
        total += a * level_loss(e.pose.t(), e.pose.q(), gt.t(), gt.q(), params.s_t, params.s_q)?;
    }
    Ok(total)
}

/// Graph form of [`level_loss`]. `t` is `[3]`, `q` is `[4]`, `s_t` and `s_q` are `[1]`.
pub fn level_loss_op(g: &mut Graph, t: Var, q: Var, gt: &Pose, s_t: Var, s_q: Var) -> Result<Var> {
    let qn = g.value(q).norm();
    if !(qn > MIN_QUAT_NORM) {
        return Err(Error::InvalidInput(format!("quaternion norm {qn:e} too small")));
    }
    let tg = g.constant(Tensor::from_vec(&[3], gt.t().to_vec()));
    let qg = g.constant(Tensor::from_vec(&[4], gt.q().to_vec()));
    let dt = g.sub(tg, t);
    let dt = g.abs(dt);
    let lt = g.sum(dt);
    let q = g.normalize_axis0(q, MIN_QUAT_NORM);
    let q = g.canonical_sign(q);
    let dq = g.sub(qg, q);
    let dq = g.square(dq);
    let lq = g.sum(dq);
    let neg_st = g.scale(s_t, -1.0);
    let wt = g.exp(neg_st);
    let neg_sq = g.scale(s_q, -1.0);
    let wq = g.exp(neg_sq);
    let a = g.mul(lt, wt);
    let b = g.mul(lq, wq);
    let a = g.add(a, s_t);
    let b = g.add(b, s_q);
    Ok(g.add(a, b))
}

/// Graph form of [`total_loss`] over per-level pose variables.
pub fn total_loss_op(g: &mut Graph, levels: &[PoseVars], gt: &Pose, alpha: &[f64], s_t: Var, s_q: Var) -> Result<Var> {
    if levels.len() != alpha.len() || levels.is_empty() {
        return Err(Error::InvalidInput(format!("{} level poses for {} loss weights", levels.len(), alpha.len())));
    }
    let mut total: Option<Var> = None;
    for (p, a) in levels.iter().zip(alpha) {
        let l = level_loss_op(g, p.t, p.q, gt, s_t, s_q)?;
        let l = g.scale(l, *a);
        total = Some(match total {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    Ok(total.expect("non-empty levels"))
}
