use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdn_core::par::Execution;
use sdn_nn::attention::{gca_forward, linear_attention_forward, reference};
use sdn_nn::gradcheck::random_values;
use sdn_nn::{ArchConfig, Mechanism, Model};

fn attention_scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_scaling");
    g.sample_size(10);
    let ch = 16;
    for side in [8usize, 16, 32] {
        let n = side * side;
        let q: Vec<f64> = random_values(ch * n, 0.1, 1.0, 1);
        let k: Vec<f64> = random_values(ch * n, 0.1, 1.0, 2);
        let v: Vec<f64> = random_values(ch * n, -1.0, 1.0, 3);
        g.bench_with_input(BenchmarkId::new("linear", n), &n, |b, &n| b.iter(|| linear_attention_forward(&q, &k, &v, ch, n, 4)));
        g.bench_with_input(BenchmarkId::new("quadratic_oracle", n), &n, |b, &n| {
            b.iter(|| reference::linear_attention_quadratic(&q, &k, &v, ch, n, 4))
        });
        g.bench_with_input(BenchmarkId::new("gca", n), &n, |b, &n| b.iter(|| gca_forward(&q, &k, ch, n)));
    }
    g.finish();
}

fn batch_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_forward_8_pairs");
    g.sample_size(10);
    let model = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 0).unwrap();
    let img = |s| random_values(3 * 64 * 64, 0.0, 1.0, s).into_iter().map(|v| v as f32).collect::<Vec<f32>>();
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..8).map(|i| (img(i), img(100 + i))).collect();
    g.bench_function("sequential", |b| b.iter(|| model.forward_batch(&pairs, Execution::Sequential).unwrap()));
    g.bench_function("parallel", |b| b.iter(|| model.forward_batch(&pairs, Execution::available()).unwrap()));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    let img = |s| random_values(3 * 64 * 64, 0.0, 1.0, s).into_iter().map(|v| v as f32).collect::<Vec<f32>>();
    let (a, s) = (img(1), img(2));
    let mask: Vec<u8> = (0..64 * 64).map(|i| (i % 7 == 0) as u8).collect();
    for mech in [Mechanism::Gca, Mechanism::Lca, Mechanism::GcaMsa, Mechanism::ConcatOnly] {
        let model = Model::<f32>::new(ArchConfig::desk(mech), 0).unwrap();
        g.bench_function(mech.as_str(), |b| b.iter(|| model.loss_and_grads(&a, &s, &mask).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, attention_scaling, batch_forward, train_step);
criterion_main!(benches);
