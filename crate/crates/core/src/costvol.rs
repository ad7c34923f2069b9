//! Local correlation cost volume between consecutive-frame feature maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvLayout, Graph, Var};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::pyramid::{FeatureMap, Modality};
use crate::tensor::Tensor;

pub const DEFAULT_SEARCH_RADIUS: usize = 4;
/// Norm clamp used when normalizing per-pixel feature vectors.
pub const NORM_EPS: f64 = 1e-12;
pub const ENCODER_HIDDEN: usize = 96;
pub const ENCODER_OUT: usize = 64;

/// `(2S+1)² × H × W` similarity grid. Channel `k` holds displacement
/// `(dx, dy)` with `k = (dy + S)(2S + 1) + (dx + S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub data: Tensor,
    pub search_radius: usize,
}

impl CostVolume {
    pub fn channels_for(search_radius: usize) -> usize {
        (2 * search_radius + 1).pow(2)
    }

    pub fn channel_index(search_radius: usize, dx: isize, dy: isize) -> usize {
        let s = search_radius as isize;
        let side = 2 * s + 1;
        ((dy + s) * side + (dx + s)) as usize
    }

    /// Inverse of [`CostVolume::channel_index`].
    pub fn displacement(search_radius: usize, channel: usize) -> (isize, isize) {
        let side = 2 * search_radius + 1;
        let s = search_radius as isize;
        ((channel % side) as isize - s, (channel / side) as isize - s)
    }
}

/// Divides each pixel's channel vector by its L2 norm; zero vectors stay zero.
pub fn normalize_features(f: &FeatureMap) -> FeatureMap {
    let mut g = Graph::new();
    let v = g.constant(f.data.clone());
    let n = g.normalize_axis0(v, NORM_EPS);
    FeatureMap {
        data: g.value(n).clone(),
        level: f.level,
        modality: f.modality,
    }
}

/// Correlation of `f1` against `f2` shifted by every displacement within the
/// search radius. Shifts that leave the image contribute zero.
pub fn compute_cost_volume(f1: &FeatureMap, f2: &FeatureMap, search_radius: i64) -> Result<CostVolume> {
    if search_radius < 0 {
        return Err(Error::InvalidInput(format!("negative search radius {search_radius}")));
    }
    if f1.data.shape() != f2.data.shape() {
        return Err(Error::shape(format!(
            "cost volume inputs differ: {:?} vs {:?}",
            f1.data.shape(),
            f2.data.shape()
        )));
    }
    let s = search_radius as usize;
    Ok(CostVolume {
        data: correlate(&f1.data, &f2.data, s),
        search_radius: s,
    })
}

/// Range of `x` for which `x + d` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    lo.min(hi)..hi
}

pub(crate) fn correlate(f1: &Tensor, f2: &Tensor, s: usize) -> Tensor {
    let (c, h, w) = f1.dims3();
    let side = 2 * s + 1;
    let mut out = Tensor::zeros(&[side * side, h, w]);
    let (a, b) = (f1.data(), f2.data());
    let o = out.data_mut();
    for k in 0..side * side {
        let (dx, dy) = CostVolume::displacement(s, k);
        let xs = valid_range(w, dx);
        for y in valid_range(h, dy) {
            let y2 = (y as isize + dy) as usize;
            let orow = &mut o[(k * h + y) * w..(k * h + y + 1) * w];
            for ch in 0..c {
                let ra = &a[(ch * h + y) * w..];
                let rb = &b[(ch * h + y2) * w..];
                for x in xs.clone() {
                    orow[x] += ra[x] * rb[(x as isize + dx) as usize];
                }
            }
        }
    }
    out
}

/// Graph op for the cost volume with gradients to both feature maps.
pub fn cost_volume_op(g: &mut Graph, f1: Var, f2: Var, s: usize) -> Var {
    assert_eq!(g.shape(f1), g.shape(f2), "cost volume inputs differ");
    let out = correlate(g.value(f1), g.value(f2), s);
    g.custom(
        &[f1, f2],
        out,
        Box::new(move |args| {
            let (t1, t2) = (args.inputs[0], args.inputs[1]);
            let (c, h, w) = t1.dims3();
            let side = 2 * s + 1;
            let gr = args.grad.data();
            let (a, b) = (t1.data(), t2.data());
            let mut g1 = args.needs[0].then(|| Tensor::zeros(t1.shape()));
            let mut g2 = args.needs[1].then(|| Tensor::zeros(t2.shape()));
            for k in 0..side * side {
                let (dx, dy) = CostVolume::displacement(s, k);
                let xs = valid_range(w, dx);
                for y in valid_range(h, dy) {
                    let y2 = (y as isize + dy) as usize;
                    let grow = &gr[(k * h + y) * w..(k * h + y + 1) * w];
                    for ch in 0..c {
                        let i1 = (ch * h + y) * w;
                        let i2 = (ch * h + y2) * w;
                        for x in xs.clone() {
                            let x2 = (x as isize + dx) as usize;
                            if let Some(g1) = g1.as_mut() {
                                g1.data_mut()[i1 + x] += grow[x] * b[i2 + x2];
                            }
                            if let Some(g2) = g2.as_mut() {
                                g2.data_mut()[i2 + x2] += grow[x] * a[i1 + x];
                            }
                        }
                    }
                }
            }
            vec![g1, g2]
        }),
    )
}

/// Two 3×3 convolution + ReLU layers turning raw costs into motion features.
#[derive(Debug, Clone, Copy)]
pub struct CostEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub search_radius: usize,
}

impl CostEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, search_radius: usize, rng: &mut R) -> Self {
        let cin = CostVolume::channels_for(search_radius);
        let layout = ConvLayout::same(3, 1);
        Self {
            conv1: Conv2d::new(store, &format!("{name}/conv1"), cin, ENCODER_HIDDEN, 3, layout, Init::He, rng),
            conv2: Conv2d::new(store, &format!("{name}/conv2"), ENCODER_HIDDEN, ENCODER_OUT, 3, layout, Init::He, rng),
            search_radius,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cost: Var) -> Var {
        let h = self.conv1.forward(g, store, cost);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        g.relu(h)
    }

    pub fn encode(&self, store: &ParamStore, cost: &CostVolume, level: usize) -> Result<FeatureMap> {
        if cost.search_radius != self.search_radius {
            return Err(Error::shape(format!(
                "encoder expects search radius {}, got {}",
                self.search_radius, cost.search_radius
            )));
        }
        let mut g = Graph::new();
        let v = g.constant(cost.data.clone());
        let out = self.forward(&mut g, store, v);
        FeatureMap::new(g.value(out).clone(), level, Modality::Fused)
    }
}
