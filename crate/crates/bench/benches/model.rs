use criterion::{criterion_group, criterion_main, Criterion};

use lvo_core::data::{generate_synthetic_sequence, DepthBackend, SyntheticConfig};
use lvo_core::graph::Graph;
use lvo_core::loss::DEFAULT_ALPHA;
use lvo_core::posenet::Dropout;
use lvo_core::train::prepare_pair;
use lvo_core::{Model, ModelConfig};

fn model(c: &mut Criterion) {
    let seq = generate_synthetic_sequence(&SyntheticConfig { frames: 2, ..Default::default() }, 1).unwrap();
    let pair = prepare_pair(&seq.pair(0).unwrap(), "", &DepthBackend::GroundTruth, true).unwrap();
    let (model, store) = Model::new(ModelConfig::default(), 1).unwrap();
    let mut group = c.benchmark_group("model_64x32");
    group.sample_size(20);
    group.bench_function("infer", |b| b.iter(|| model.infer(&store, &pair.input).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, &pair.input, &mut Dropout::Off).unwrap();
            let loss = model.loss(&mut g, &store, &out, &pair.gt, &DEFAULT_ALPHA).unwrap();
            g.backward(loss)
        })
    });
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
