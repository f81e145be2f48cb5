use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gpam_core::attention::Mechanism;
use gpam_core::collapse::{dagpam_bound_certificate, precondition_instance};
use gpam_core::model::{build_stack, profile_forward, seed_streams, StackConfig};
use gpam_core::numerics::{gaussian_matrix, RngStream};
use gpam_core::parallel::{map_indexed_with, Schedule};

const SCHEDULES: [(&str, Schedule); 2] = [("sequential", Schedule::Sequential), ("parallel", Schedule::Parallel)];

fn faithfulness_seeds(c: &mut Criterion) {
    let cfg = StackConfig {
        n_layers: 6,
        init_std: 0.125,
        ..StackConfig::default()
    }
    .with_mechanism(Mechanism::Dagpam, 1.0, 2.0);
    let mut group = c.benchmark_group("faithfulness_seeds");
    group.sample_size(10);
    for (name, schedule) in SCHEDULES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_indexed_with(schedule, 8, |s| {
                    let (mut w_rng, mut x_rng) = seed_streams(0, s);
                    let stack = build_stack(&cfg, &mut w_rng).unwrap();
                    let x = gaussian_matrix(&mut x_rng, 32, cfg.d_model, 1.0);
                    black_box(profile_forward(&stack.forward(&x).unwrap(), &x).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn bound_certificates(c: &mut Criterion) {
    let mut group = c.benchmark_group("bound_certificates");
    for (name, schedule) in SCHEDULES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_indexed_with(schedule, 100, |i| {
                    let mut rng = RngStream::new(0, i as u64);
                    let (x, w) = precondition_instance(&mut rng, 6, 8, 4, 8, 1.0, 1.5).unwrap();
                    black_box(dagpam_bound_certificate(&x, &w).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, faithfulness_seeds, bound_certificates);
criterion_main!(benches);
