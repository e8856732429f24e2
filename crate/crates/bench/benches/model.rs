use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pointssm_bench::{desk_model, rng};
use pointssm_core::data::generate_synthetic;
use pointssm_core::model::prepare;
use pointssm_core::train::batch_gradients;
use pointssm_core::Tape;

fn forward(c: &mut Criterion) {
    let (model, store, data) = desk_model(1);
    c.bench_function("model_forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            model
                .forward(&p, black_box(&data[0]), None)
                .unwrap()
                .value()
        })
    });
}

fn prepare_cloud(c: &mut Criterion) {
    let (model, _, _) = desk_model(0);
    let cloud = generate_synthetic(3, 256, 0, true).unwrap();
    c.bench_function("prepare_256_points", |b| {
        b.iter(|| prepare(&model.cfg, black_box(&cloud)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let (model, store, data) = desk_model(4);
    let batch: Vec<_> = data.iter().collect();
    let mut drop_rng = rng(3);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("batch_gradients_4", |b| {
        b.iter(|| batch_gradients(&model, &store, black_box(&batch), &mut drop_rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, prepare_cloud, train_step);
criterion_main!(benches);
