//! Parallel vs sequential execution of the hot kernels and a full training step.

use std::hint::black_box;

use asymgan_core::config::Config;
use asymgan_core::kernels::{conv2d, conv2d_backward, instance_norm, Wanted};
use asymgan_core::par;
use asymgan_core::trainer::{training_step, BackendSet, StepConfig, TrainState};
use asymgan_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[2, 32, 64, 64], &mut rng);
    let w = random(&[64, 32, 3, 3], &mut rng);
    let b = random(&[64], &mut rng);
    let y = conv2d(&x, &w, Some(&b), 1, 1);
    let gout = random(y.shape(), &mut rng);

    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (mode, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("conv2d_3x3", mode), |bch| {
            bch.iter(|| conv2d(black_box(&x), &w, Some(&b), 1, 1))
        });
        group.bench_function(BenchmarkId::new("conv2d_backward", mode), |bch| {
            bch.iter(|| conv2d_backward(black_box(&x), &w, &gout, 1, 1, Wanted::ALL))
        });
        group.bench_function(BenchmarkId::new("instance_norm", mode), |bch| {
            bch.iter(|| instance_norm(black_box(&y), None, None))
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn step(c: &mut Criterion) {
    let mut cfg = Config::from_text("").expect("defaults").with_stub_backends();
    for (k, v) in [
        ("model.base_channels", "16"),
        ("model.n_residual_blocks_f", "2"),
        ("model.dense_growth", "32"),
        ("model.discriminator.base_channels", "16"),
        ("model.discriminator.n_down_layers", "3"),
    ] {
        cfg.set(k, v).expect("valid key");
    }
    let backends = BackendSet::load(&cfg).expect("stub backends");
    let state = TrainState::new(&cfg).expect("valid model");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (random(&[1, 3, 64, 64], &mut rng), random(&[1, 3, 64, 64], &mut rng));
    let sc = StepConfig {
        loss: &cfg.loss,
        train: &cfg.train,
        lr: cfg.train.lr,
    };

    let mut group = c.benchmark_group("training_step_64px");
    group.sample_size(10);
    for (mode, on) in MODES {
        par::set_parallel(on);
        group.bench_function(mode, |bch| {
            bch.iter_batched(
                || state.clone(),
                |mut s| training_step(&mut s, &x, &y, &backends.borrow(), &sc).expect("finite"),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, kernels, step);
criterion_main!(benches);
