use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use streampoint::decoder::{batched_forward, CachePolicy};
use streampoint::encoder::encode;
use streampoint::model::Graph;
use streampoint::scenegen::{generate_scene, SceneConfig};
use streampoint::trainer::{sequence_gradients, TrainConfig};
use streampoint_bench::default_params;

fn kernels(c: &mut Criterion) {
    let params = default_params(0);
    let scene = generate_scene(3, &SceneConfig::default()).unwrap();
    let rgb: Vec<&[f32]> = scene.frames.iter().map(|f| f.rgb.as_slice()).collect();

    c.bench_function("encode_frame", |b| b.iter(|| black_box(encode(&params, rgb[0], 1).unwrap())));

    c.bench_function("batched_forward_6", |b| {
        b.iter(|| {
            let mut g = Graph::new(&params, false);
            black_box(batched_forward(&mut g, &rgb, CachePolicy::FullCausal).unwrap().levels.len())
        })
    });

    let loss = TrainConfig::default().loss;
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("sequence_gradients_6", |b| {
        b.iter(|| black_box(sequence_gradients(&params, &scene, CachePolicy::FullCausal, &loss).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
