use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use moecl_bench::{random_batch, small_stream, two_task_layer};
use moecl_core::scr::{scr_step, ScrState, StepOptions};
use moecl_core::{learn_task, AdapterModel, ModelConfig, PhaseSchedule, ScrConfig, TrainConfig};

fn layer_passes(c: &mut Criterion) {
    let layer = two_task_layer(64, 4, 4, 3, 7);
    let x = random_batch(32, 64, 8);
    let grad_y = random_batch(32, 64, 9);

    c.bench_function("layer_forward_d64_b32_e7", |b| {
        b.iter(|| layer.forward(1, black_box(&x)).unwrap())
    });
    let (_, cache) = layer.forward(1, &x).unwrap();
    c.bench_function("layer_backward_d64_b32_e7", |b| {
        b.iter(|| layer.backward(&cache, black_box(&grad_y), None).unwrap())
    });
}

fn scr(c: &mut Criterion) {
    let layer = two_task_layer(64, 4, 4, 3, 7);
    let x = random_batch(32, 64, 8);
    let grad_y = random_batch(32, 64, 9);
    let (_, cache) = layer.forward(1, &x).unwrap();
    let (_, grads) = layer.backward(&cache, &grad_y, None).unwrap();
    let routing = layer.route(1, &x).unwrap();
    let cfg = ScrConfig::new(0.01, 0.01).unwrap();

    c.bench_function("scr_step_d64_e7", |b| {
        b.iter_batched(
            || (layer.clone(), ScrState::new(&layer, 1)),
            |(mut l, mut state)| scr_step(&mut l, &grads, &routing, &mut state, &cfg, StepOptions::default()).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn lifecycle(c: &mut Criterion) {
    let tasks = small_stream(32, 8);
    let schedule = PhaseSchedule { identify_steps: 20, finetune_steps: 20, ..PhaseSchedule::default() };
    let cfg = TrainConfig::new(schedule, ScrConfig::new(0.01, 0.3).unwrap());
    let mut base = AdapterModel::new(ModelConfig::default()).unwrap();
    learn_task(&mut base, &tasks[0], &cfg).unwrap();

    let mut group = c.benchmark_group("learn_task");
    group.sample_size(10);
    group.bench_function("second_task_20_20", |b| {
        b.iter_batched(
            || base.clone(),
            |mut m| learn_task(&mut m, &tasks[1], &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, layer_passes, scr, lifecycle);
criterion_main!(benches);
