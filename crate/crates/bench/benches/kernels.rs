use std::hint::black_box;

use aia_bench::{mixed_samples, model};
use aia_core::model::forward;
use aia_core::numerics::{softmax_rows, Tensor};
use aia_core::train::{batch_objective, layer_targets, AlignmentTerm, TrainConfig};
use aia_core::Task;
use criterion::{criterion_group, criterion_main, Criterion};

fn softmax(c: &mut Criterion) {
    let t = 24;
    let x = Tensor::new(vec![t, t], (0..t * t).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mask: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
    c.bench_function("softmax_rows 24x24 causal", |b| b.iter(|| softmax_rows(black_box(&x), &mask).unwrap()));
}

fn forward_pass(c: &mut Criterion) {
    let ckpt = model();
    let seq = &mixed_samples(1, 0)[0];
    c.bench_function("forward with attention", |b| b.iter(|| forward(&ckpt, black_box(seq), true).unwrap()));
}

fn batch_step(c: &mut Criterion) {
    let ckpt = model();
    let cfg = TrainConfig::default();
    let samples: Vec<_> = mixed_samples(16, 0).into_iter().filter(|s| s.task == Task::Generation).collect();
    let term = AlignmentTerm {
        targets: layer_targets(&cfg, Task::Generation).unwrap(),
        kind: cfg.aia.penalty,
        lambda: 40.0,
    };
    let mut group = c.benchmark_group("batch objective, 8 samples");
    group.sample_size(20);
    group.bench_function("ntp only", |b| {
        b.iter(|| batch_objective(&ckpt.config, &ckpt.tensors, black_box(&samples), None, true).unwrap())
    });
    group.bench_function("ntp + alignment", |b| {
        b.iter(|| batch_objective(&ckpt.config, &ckpt.tensors, black_box(&samples), Some(&term), true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, softmax, forward_pass, batch_step);
criterion_main!(benches);
