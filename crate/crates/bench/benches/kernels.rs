use std::hint::black_box;

use cdetr::matching::hungarian_match;
use cdetr::scene::generate_scene;
use cdetr::train::Trainer;
use cdetr::Graph;
use cdetr_bench::{presets, random_cost, random_tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for (k, n) in [(3, 16), (8, 16), (16, 64)] {
        let cost = random_cost(k, n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{k}x{n}")), &cost, |b, cost| {
            b.iter(|| hungarian_match(black_box(cost)).unwrap())
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for d in [16, 64] {
        let (a, w) = (random_tensor(&[64, d], 1), random_tensor(&[d, d], 2));
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(a.clone());
                let p = g.param(w.clone());
                let y = g.matmul(x, p).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(p).is_some())
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, config) in presets() {
        let scene = generate_scene(&config.scene, 0).unwrap();
        let trainer = Trainer::new(&config).unwrap();
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let p = trainer.params.bind(&mut g, false);
                black_box(trainer.model.forward(&mut g, &p, &scene.image, false).unwrap().decoder.layers.len())
            })
        });
        group.bench_function(BenchmarkId::new("train_step", name), |b| {
            let mut t = Trainer::new(&config).unwrap();
            b.iter(|| black_box(t.step().unwrap().loss))
        });
    }
    group.finish();
}

criterion_group!(benches, hungarian, matmul, model);
criterion_main!(benches);
