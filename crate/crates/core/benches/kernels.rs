use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use sparq_core::bounds::{campaign, VectorDist};
use sparq_core::sparsifier::sparsify_with;
use sparq_core::tensor::{rand_matrix, Distribution};
use sparq_core::trainer::{evaluate_with, AwConfig, Dataset, TrainConfig, TrainState};
use sparq_core::{Execution, Rng, SparsitySpec};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_sparsify(c: &mut Criterion) {
    let w = rand_matrix(&mut Rng::new(1), 1024, 1024, Distribution::Gaussian);
    let mut group = c.benchmark_group("sparsify_1024x1024");
    for spec in SparsitySpec::presets() {
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, spec), &spec, |b, spec| {
                b.iter(|| sparsify_with(black_box(&w), spec, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_campaign(c: &mut Criterion) {
    let spec = SparsitySpec::two_four();
    let mut group = c.benchmark_group("bounds_campaign_10k");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| campaign(7, 10_000, 64, VectorDist::Gaussian, &spec, exec))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = TrainConfig {
        sparsity: Some(SparsitySpec::two_four()),
        aw: AwConfig::both(4),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg, 64, 10).unwrap();
    let mut rng = Rng::new(2);
    let x = rand_matrix(&mut rng, 4096, 64, Distribution::Gaussian);
    let labels = (0..4096).map(|_| rng.below(10) as usize).collect();
    let data = Dataset::new(x, labels, 10).unwrap();
    state
        .calibrate_inputs(&data.batch(&(0..64).collect::<Vec<_>>()))
        .unwrap();
    let mut group = c.benchmark_group("evaluate_4096");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| evaluate_with(&state, &data, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_sparsify, bench_campaign, bench_evaluate);
criterion_main!(benches);
