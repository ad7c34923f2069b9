use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lvo_core::costvol::{compute_cost_volume, normalize_features};
use lvo_core::data::lidar::{project_lidar, LidarCalibration};
use lvo_core::data::completion::fallback_completion;
use lvo_core::data::CameraIntrinsics;
use lvo_core::evalkit::{segment_errors, SEGMENT_LENGTHS};
use lvo_core::geometry::{compose, Pose, Trajectory};
use lvo_core::pyramid::Modality;
use lvo_core::{FeatureMap, Tensor};

fn cost_volume(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("cost_volume");
    for (ch, h, w) in [(16, 16, 32), (64, 44, 152)] {
        let mk = |r: &mut ChaCha8Rng| normalize_features(&FeatureMap::new(Tensor::randn(&[ch, h, w], 1.0, r), 0, Modality::Fused).unwrap());
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{h}x{w}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| compute_cost_volume(black_box(a), black_box(b), 4).unwrap())
        });
    }
    group.finish();
}

fn segment_metric(c: &mut Criterion) {
    let step = Pose::from_axis_angle([0.0, 1.0, 0.0], 0.002, [0.0, 0.0, 1.0]).unwrap();
    let mut poses = vec![Pose::identity()];
    for _ in 0..1100 {
        poses.push(compose(poses.last().unwrap(), &step).unwrap());
    }
    let gt = Trajectory::new(poses).unwrap();
    let pred = gt.transformed(&Pose::from_translation([0.1, 0.0, 0.0]).unwrap()).unwrap();
    c.bench_function("segment_errors_1100_frames", |b| b.iter(|| segment_errors(black_box(&gt), black_box(&pred), &SEGMENT_LENGTHS).unwrap()));
}

fn depth(c: &mut Criterion) {
    let k = CameraIntrinsics::new(700.0, 700.0, 608.0, 176.0, 1216, 352).unwrap();
    let points: Vec<[f64; 3]> = (0..60_000)
        .map(|i| {
            let a = i as f64 * 0.0007;
            [a.sin() * 20.0, 1.5 - (i % 64) as f64 * 0.05, 5.0 + (i % 997) as f64 * 0.06]
        })
        .collect();
    c.bench_function("project_lidar_60k", |b| b.iter(|| project_lidar(black_box(&points), &LidarCalibration::identity(), &k)));
    let sparse = project_lidar(&points, &LidarCalibration::identity(), &k);
    c.bench_function("fallback_completion_1216x352", |b| b.iter(|| fallback_completion(black_box(&sparse)).unwrap()));
}

criterion_group!(benches, cost_volume, segment_metric, depth);
criterion_main!(benches);
