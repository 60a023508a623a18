use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kexlab_bench::{experiment_config, loop_params, recording, secrets, shared};
use kexlab_core::circuit::solve_loop;
use kexlab_core::entropy::brute_force_posterior;
use kexlab_core::harness::run_experiment;
use kexlab_core::harness::wire::{decode_frame, encode_frame, AnalogSample, WireMessage};
use kexlab_core::protocol::{run_round, Deltas};
use kexlab_core::Phase;

fn circuit(c: &mut Criterion) {
    let params = loop_params();
    c.bench_function("solve_loop", |b| b.iter(|| solve_loop(black_box(&params))));
    let (shared, a, b) = (shared(), secrets(2000, 5, 1), secrets(3000, 1, 2));
    c.bench_function("run_round", |bench| {
        bench.iter(|| run_round(0, &shared, black_box(&a), black_box(&b), &Deltas::default()))
    });
}

fn posterior(c: &mut Criterion) {
    let mut group = c.benchmark_group("brute_force_posterior");
    for size in [16usize, 256] {
        let (rec, p_s, palettes) = recording(4, size);
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| brute_force_posterior(&rec, &p_s, &palettes))
        });
    }
    group.finish();
}

fn wire(c: &mut Criterion) {
    let msg = WireMessage::AnalogSample(AnalogSample {
        round_k: 3,
        phase: Phase::BobPerturb,
        obs: kexlab_core::circuit::solve_loop(&loop_params()),
    });
    let frame = encode_frame(&msg);
    c.bench_function("encode_frame", |b| b.iter(|| encode_frame(black_box(&msg))));
    c.bench_function("decode_frame", |b| b.iter(|| decode_frame(black_box(&frame))));
}

fn experiment(c: &mut Criterion) {
    let cfg = experiment_config(16);
    c.bench_function("run_experiment_16_rounds", |b| b.iter(|| run_experiment(&cfg)));
}

criterion_group!(benches, circuit, posterior, wire, experiment);
criterion_main!(benches);
