//! Central finite-difference gradient checks.
//!
//! Errors are measured per tensor as `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! over the checked coordinates. The denominator is floored at
//! `max(NOISE_FLOOR, SCALE_FLOOR × largest tensor gradient norm)` so tensors
//! whose true gradient vanishes (for example key biases under a softmax) are
//! not judged on finite-difference round-off alone.

use crate::graph::{Graph, Var};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const NOISE_FLOOR: f64 = 1e-6;
pub const SCALE_FLOOR: f64 = 1e-3;
/// Largest number of coordinates perturbed per tensor; larger tensors are
/// probed on an evenly strided subset.
pub const DEFAULT_MAX_COORDS: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Label of the tensor with the largest error.
    pub worst: String,
    pub coords_checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Default)]
struct Collector {
    entries: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Collector {
    fn push(&mut self, label: String, analytic: Vec<f64>, numeric: Vec<f64>) {
        self.entries.push((label, analytic, numeric));
    }

    fn finish(self) -> GradReport {
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = self
            .entries
            .iter()
            .map(|(_, a, n)| norm(a).max(norm(n)))
            .fold(0.0, f64::max);
        let floor = NOISE_FLOOR.max(SCALE_FLOOR * scale);
        let mut report = GradReport {
            max_rel_error: 0.0,
            worst: String::new(),
            coords_checked: 0,
        };
        for (label, a, n) in &self.entries {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let rel = diff / norm(a).max(norm(n)).max(floor);
            report.coords_checked += a.len();
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = label.clone();
            }
        }
        report
    }
}

fn probe_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let stride = len as f64 / max as f64;
        (0..max).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
    }
}

/// Checks gradients of a scalar function with respect to each input tensor.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
    check_inputs_with(inputs, DEFAULT_STEP, DEFAULT_MAX_COORDS, f)
}

pub fn check_inputs_with(
    inputs: &[Tensor],
    step: f64,
    max_coords: usize,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradReport {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut report = Collector::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic_full = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let coords = probe_coords(inputs[i].len(), max_coords);
        let mut work = inputs.to_vec();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + step;
            let fp = eval(&work);
            work[i].data_mut()[c] = orig - step;
            let fm = eval(&work);
            work[i].data_mut()[c] = orig;
            analytic.push(analytic_full.data()[c]);
            numeric.push((fp - fm) / (2.0 * step));
        }
        report.push(format!("input{i}"), analytic, numeric);
    }
    report.finish()
}

/// Checks gradients of a scalar function with respect to the given parameters.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradReport {
    check_params_with(store, ids, DEFAULT_STEP, DEFAULT_MAX_COORDS, f)
}

pub fn check_params_with(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    max_coords: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradReport {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, s);
        g.value(out).item()
    };
    let mut work = store.clone();
    let mut report = Collector::default();
    for &id in ids {
        let len = store.value(id).len();
        let analytic_full = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let coords = probe_coords(len, max_coords);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work.value(id).data()[c];
            work.value_mut(id).data_mut()[c] = orig + step;
            let fp = eval(&work);
            work.value_mut(id).data_mut()[c] = orig - step;
            let fm = eval(&work);
            work.value_mut(id).data_mut()[c] = orig;
            analytic.push(analytic_full.data()[c]);
            numeric.push((fp - fm) / (2.0 * step));
        }
        report.push(store.name(id).to_string(), analytic, numeric);
    }
    report.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let inputs = vec![Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0])];
        // Correct rule passes.
        let ok = check_inputs(&inputs, |g, v| {
            let s = g.square(v[0]);
            g.sum(s)
        });
        assert!(ok.passes(1e-8), "{ok:?}");
        // A custom op whose backward is off by a factor of two fails.
        let bad = check_inputs(&inputs, |g, v| {
            let val = g.value(v[0]).map(|x| x * x);
            let sq = g.custom(
                &[v[0]],
                val,
                Box::new(|a| vec![Some(a.inputs[0].zip_map(a.grad, |x, g| 4.0 * x * g))]),
            );
            g.sum(sq)
        });
        assert!(bad.max_rel_error > 0.4, "{bad:?}");
    }
}
