use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lvo_core::costvol::{compute_cost_volume, normalize_features, CostVolume};
use lvo_core::flow::{gated_flow_op, warp_op, DepthModulation, FlowHead, DEPTH_FEATURES};
use lvo_core::geometry::Pose;
use lvo_core::graph::Graph;
use lvo_core::posenet::{apply_residual, fuse_poses, fusion_weights, PoseEstimate};
use lvo_core::pyramid::{ChannelAttention, CrossAttention, FeaturePyramid, Modality, SpatialAttention};
use lvo_core::{FeatureMap, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn feature_map(t: Tensor) -> FeatureMap {
    FeatureMap::new(t, 0, Modality::Fused).unwrap()
}

fn random_pose(r: &mut ChaCha8Rng, max_angle: f64) -> Pose {
    let axis = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)];
    let t = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
    Pose::from_axis_angle(axis, r.gen_range(-max_angle..max_angle), t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_gates_shrink_features(seed in any::<u64>(), c in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", c, &mut r);
        let sa = SpatialAttention::new(&mut store, "sa", &mut r);
        let x = Tensor::randn(&[c, h, w], 2.0, &mut r);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        for out in [ca.forward(&mut g, &store, v), sa.forward(&mut g, &store, v)] {
            for (o, i) in g.value(out).data().iter().zip(x.data()) {
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn cross_attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..10) {
        let mut r = rng(seed);
        let c = 4;
        let mut store = ParamStore::new();
        let xa = CrossAttention::new(&mut store, "xa", c, &mut r);
        let a = Tensor::randn(&[c, 1, n], 1.0, &mut r);
        let b = Tensor::randn(&[c, 1, n], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permute = |t: &Tensor| Tensor::from_fn(&[c, 1, n], |i| t.data()[(i / n) * n + perm[i % n]]);
        let run = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
            let o = xa.forward(&mut g, &store, vx, vy);
            g.value(o).clone()
        };
        let lhs = run(&permute(&a), &permute(&b));
        let rhs = permute(&run(&a, &b));
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_entries_are_bounded(seed in any::<u64>(), c in 1usize..6, h in 1usize..8, w in 1usize..8, s in 0i64..4) {
        let mut r = rng(seed);
        let f1 = normalize_features(&feature_map(Tensor::randn(&[c, h, w], 1.0, &mut r)));
        let f2 = normalize_features(&feature_map(Tensor::randn(&[c, h, w], 1.0, &mut r)));
        let cv = compute_cost_volume(&f1, &f2, s).unwrap();
        prop_assert!(cv.data.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        // Out-of-image displacements are exactly zero.
        let su = s as usize;
        for k in 0..CostVolume::channels_for(su) {
            let (dx, dy) = CostVolume::displacement(su, k);
            prop_assert_eq!(CostVolume::channel_index(su, dx, dy), k);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (x2, y2) = (x + dx, y + dy);
                    if x2 < 0 || y2 < 0 || x2 >= w as isize || y2 >= h as isize {
                        prop_assert_eq!(cv.data.data()[(k * h + y as usize) * w + x as usize], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn self_correlation_peaks_at_zero(seed in any::<u64>(), c in 1usize..6, h in 1usize..8, w in 1usize..8, s in 0usize..4) {
        let mut r = rng(seed);
        let f = normalize_features(&feature_map(Tensor::randn(&[c, h, w], 1.0, &mut r)));
        let cv = compute_cost_volume(&f, &f, s as i64).unwrap();
        let zero = CostVolume::channel_index(s, 0, 0);
        for p in 0..h * w {
            let centre = cv.data.data()[zero * h * w + p];
            for k in 0..CostVolume::channels_for(s) {
                prop_assert!(cv.data.data()[k * h * w + p] <= centre + 1e-12);
            }
        }
    }

    #[test]
    fn cost_volume_follows_shifts(seed in any::<u64>(), a in -2isize..=2, b in -2isize..=2) {
        let (c, h, w, s) = (3usize, 7usize, 7usize, 2usize);
        let mut r = rng(seed);
        let f1 = normalize_features(&feature_map(Tensor::randn(&[c, h, w], 1.0, &mut r)));
        // f2(y, x) = f1(y - b, x - a), zero-filled.
        let f2 = feature_map(Tensor::from_fn(&[c, h, w], |i| {
            let (k, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (ys, xs) = (y as isize - b, x as isize - a);
            if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                0.0
            } else {
                f1.data.data()[(k * h + ys as usize) * w + xs as usize]
            }
        }));
        let cv = compute_cost_volume(&f1, &f2, s as i64).unwrap();
        let ch = CostVolume::channel_index(s, a, b);
        for y in 0..h as isize {
            for x in 0..w as isize {
                if (0..h as isize).contains(&(y + b)) && (0..w as isize).contains(&(x + a)) {
                    prop_assert!((cv.data.data()[(ch * h + y as usize) * w + x as usize] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_scaling_scales_flow(seed in any::<u64>(), lambda in 0.01f64..=1.0) {
        let mut r = rng(seed);
        let (h, w) = (3, 4);
        let mut store = ParamStore::new();
        let m = DepthModulation::new(&mut store, "m", &mut r);
        let head = FlowHead::new(&mut store, "f", 4 + 3 + DEPTH_FEATURES, false, &mut r);
        let last = head.layers[2].weight;
        let shape = store.value(last).shape().to_vec();
        *store.value_mut(last) = Tensor::randn(&shape, 0.1, &mut r);
        let feats = Tensor::randn(&[4, h, w], 1.0, &mut r);
        let cost = Tensor::randn(&[3, h, w], 1.0, &mut r);
        let inv = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0.05..1.0));
        let mut g = Graph::new();
        let (f, cf, d) = (g.constant(feats), g.constant(cost), g.constant(inv));
        let (df, gate) = m.forward(&mut g, &store, d);
        let scaled = g.scale(gate, lambda);
        let u = gated_flow_op(&mut g, &store, &head, f, cf, df, gate, None);
        let us = gated_flow_op(&mut g, &store, &head, f, cf, df, scaled, None);
        for (a, b) in g.value(u).data().iter().zip(g.value(us).data()) {
            prop_assert!((a * lambda - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let mut g = Graph::new();
        let (f, u) = (g.constant(x.clone()), g.constant(Tensor::zeros(&[2, h, w])));
        let out = warp_op(&mut g, f, u);
        prop_assert_eq!(g.value(out).data(), x.data());
    }

    #[test]
    fn fusion_weights_are_a_distribution(logits in prop::collection::vec(-40.0f64..40.0, 1..8), shift in -100.0f64..100.0) {
        let w = fusion_weights(&logits);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in w.iter().zip(fusion_weights(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_pose_is_shift_invariant_and_unit(seed in any::<u64>(), n in 1usize..5, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let base = random_pose(&mut r, 0.5);
        let est: Vec<PoseEstimate> = (0..n)
            .map(|l| {
                let noise = random_pose(&mut r, 0.05);
                PoseEstimate::new(lvo_core::geometry::compose(&base, &noise).unwrap(), l, r.gen_range(-3.0..3.0))
            })
            .collect();
        let fused = fuse_poses(&est).unwrap();
        prop_assert!((fused.q().iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        let moved: Vec<PoseEstimate> = est.iter().map(|e| PoseEstimate::new(e.pose, e.level, e.confidence_logit + shift)).collect();
        prop_assert!(fused.distance_max(&fuse_poses(&moved).unwrap()) < 1e-9);
    }

    #[test]
    fn zero_residual_keeps_pose(seed in any::<u64>(), level in 1usize..4) {
        let mut r = rng(seed);
        let e = PoseEstimate::new(random_pose(&mut r, 3.0), level, 0.3);
        let next = apply_residual(&e, &[0.0; 7]).unwrap();
        prop_assert!(next.pose.distance_max(&e.pose) < 1e-12);
        prop_assert_eq!(next.level, level - 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pyramid_levels_halve(seed in any::<u64>(), hm in 1usize..4, wm in 1usize..4) {
        let (h, w) = (16 * hm, 16 * wm);
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let p = FeaturePyramid::new(&mut store, "p", [4, 4, 4, 4], &mut r);
        let x = Tensor::uniform(&[4, h, w], 1.0, &mut r);
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = p.forward(&mut g, &store, v);
        for (l, f) in out.fused.iter().enumerate() {
            prop_assert_eq!(g.value(*f).shape(), &[4, h >> (l + 1), w >> (l + 1)][..]);
            prop_assert!(g.value(*f).data().iter().all(|v| v.is_finite()));
        }
    }
}
