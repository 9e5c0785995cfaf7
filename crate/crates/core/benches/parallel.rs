//! Benchmarks of the data-parallel fan-out against the always-sequential
//! path, over the three workloads that dominate wall time: batch Q-value
//! evaluation, curvature-block assembly, and multi-seed training fan-out.
//! Build with `--no-default-features` to measure the library with its
//! sequential fallback dispatch as well.

use criterion::{criterion_group, criterion_main, Criterion};
use dqlab_core::analysis::gauss_newton_block;
use dqlab_core::env::{plant, MdpSpec, PlantConfig};
use dqlab_core::numerics::RngState;
use dqlab_core::par;
use dqlab_core::qnet::{q_value, NetworkWeights};
use dqlab_core::schedule::{ScheduleConfig, ScheduleKind};
use dqlab_core::trainer::{run, InitMode, SamplingModeConfig, TargetRule, TrainConfig};
use std::hint::black_box;

fn instance(states: usize, width: usize, depth: usize) -> (MdpSpec, NetworkWeights) {
    let cfg = PlantConfig {
        state_feature_dim: 6,
        num_states: states,
        num_actions: 4,
        width,
        depth,
        gamma: 0.5,
        deterministic: false,
    };
    let mut rng = RngState::seed_from_u64(42);
    plant(&cfg, &mut rng).expect("plant")
}

fn bench_q_table(c: &mut Criterion) {
    let (spec, wstar) = instance(256, 16, 2);
    let pairs: Vec<(usize, usize)> = (0..spec.num_states())
        .flat_map(|s| (0..spec.num_actions()).map(move |a| (s, a)))
        .collect();
    let eval =
        |&(s, a): &(usize, usize)| q_value(&wstar, &spec.feature_map(s, a).unwrap()).unwrap();
    let mut group = c.benchmark_group("q_table_eval");
    group.bench_function(mode_name("dispatched"), |b| {
        b.iter(|| black_box(par::map(&pairs, eval)))
    });
    group.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(&pairs, eval))));
    group.finish();
}

fn bench_curvature_blocks(c: &mut Criterion) {
    let (spec, wstar) = instance(96, 12, 2);
    let layers: Vec<usize> = (0..wstar.depth()).collect();
    let mut group = c.benchmark_group("curvature_blocks");
    group.sample_size(10);
    group.bench_function(mode_name("dispatched"), |b| {
        b.iter(|| {
            black_box(par::map(&layers, |&l| {
                gauss_newton_block(&spec, &wstar, l).unwrap().frobenius_norm()
            }))
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            black_box(par::map_seq(&layers, |&l| {
                gauss_newton_block(&spec, &wstar, l).unwrap().frobenius_norm()
            }))
        })
    });
    group.finish();
}

fn bench_training_fanout(c: &mut Criterion) {
    let (spec, wstar) = instance(48, 6, 1);
    let seeds: Vec<u64> = (1..=8).collect();
    let one_run = |&seed: &u64| {
        let cfg = TrainConfig {
            outer: 4,
            inner: 40,
            eta: 0.3,
            beta: 0.8,
            buffer_size: 512,
            batch: 128,
            target_rule: TargetRule::Dqn,
            sampling_mode: SamplingModeConfig::Iid,
            burn_in: 50,
            schedule: ScheduleConfig {
                kind: ScheduleKind::Geometric,
                eps0: 0.8,
                decay: 0.8,
                ..Default::default()
            },
            init: InitMode::Planted { delta: 0.3 },
            seed,
            diagnostics: false,
        };
        run(&spec, &wstar, &cfg).unwrap().last().unwrap().e_t
    };
    let mut group = c.benchmark_group("training_fanout");
    group.sample_size(10);
    group.bench_function(mode_name("dispatched"), |b| {
        b.iter(|| black_box(par::map(&seeds, one_run)))
    });
    group.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(&seeds, one_run))));
    group.finish();
}

fn mode_name(base: &str) -> String {
    if par::is_parallel() {
        format!("{base}_rayon")
    } else {
        format!("{base}_serial_fallback")
    }
}

criterion_group!(benches, bench_q_table, bench_curvature_blocks, bench_training_fanout);
criterion_main!(benches);
