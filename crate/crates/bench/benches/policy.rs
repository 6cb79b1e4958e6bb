use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dynema::ema::{compute_beta_layer, LayerInputs, DEFAULT_CLAMP};
use dynema::metrics::compute_metrics;
use dynema::{AccuracyMatrix, Activation, BetaReduction, EmaState, Model, NetSpec, Unit};

fn ramp(n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + offset) * 0.37).sin()).collect()
}

fn bench_beta_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("compute_beta_layer");
    for width in [64usize, 4096] {
        let (t, tp, e, g, gp) = (
            ramp(width, 0.0),
            ramp(width, 1.0),
            ramp(width, 2.0),
            ramp(width, 3.0),
            ramp(width, 4.0),
        );
        let inputs = LayerInputs {
            theta: &t,
            theta_prev: &tp,
            ema_prev: &e,
            grad: &g,
            grad_prev: &gp,
        };
        for reduction in [BetaReduction::NormRatio, BetaReduction::ElementwiseMean] {
            group.bench_with_input(
                BenchmarkId::new(format!("{reduction:?}"), width),
                &inputs,
                |b, inputs| {
                    b.iter(|| compute_beta_layer(black_box(inputs), DEFAULT_CLAMP, reduction))
                },
            );
        }
    }
    group.finish();
}

fn spec() -> NetSpec {
    NetSpec {
        layer_sizes: vec![16, 32, 4],
        activation: Activation::Relu,
        init_seed: 1,
    }
}

fn bench_step(c: &mut Criterion) {
    let model = Model::init(spec()).unwrap();
    let params = model.params().clone();
    let grads = params.with_values(ramp(params.len(), 0.5)).unwrap();
    let shifted = params.with_values(ramp(params.len(), 1.5)).unwrap();
    c.bench_function("ema_step", |b| {
        let mut ema = EmaState::new(&params);
        ema.step(&params, &grads).unwrap();
        b.iter(|| ema.step(black_box(&shifted), black_box(&grads)).unwrap())
    });
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let model = Model::init(spec()).unwrap();
    let xs: Vec<Vec<f64>> = (0..16).map(|k| ramp(16, k as f64)).collect();
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..16).map(|k| k % 4).collect();
    c.bench_function("loss_and_grad_batch16", |b| {
        b.iter(|| {
            model
                .loss_and_grad(black_box(&inputs), black_box(&labels))
                .unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let tasks = 50;
    let rows = (0..tasks)
        .map(|i| (0..=i).map(|j| 50.0 + ((i * 7 + j) % 40) as f64).collect())
        .collect();
    let matrix = AccuracyMatrix::new(rows, Unit::Percent).unwrap();
    c.bench_function("compute_metrics_50_tasks", |b| {
        b.iter(|| compute_metrics(black_box(&matrix)))
    });
}

criterion_group!(
    benches,
    bench_beta_layer,
    bench_step,
    bench_loss_and_grad,
    bench_metrics
);
criterion_main!(benches);
