use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use progae_core::config::Preset;
use progae_core::data::{ingest, Partition};
use progae_core::trainer::TrainState;
use progae_core::PhaseState;
use progae_bench::codes;

fn train_step(c: &mut Criterion) {
    let cfg = Preset::DeskSynthetic.config();
    let data = ingest(&cfg.data, cfg.model.max_resolution, cfg.seed).unwrap();
    let idx: Vec<usize> = data.indices(Partition::Train)[..cfg.train.batch_schedule[0]].to_vec();
    let mut group = c.benchmark_group("desk_train_step");
    group.sample_size(10);
    for level in 0..cfg.model.levels() {
        let batch = data.gather(&idx, level).unwrap();
        let mut state = TrainState::new(cfg.clone()).unwrap();
        state.progress.level = level;
        group.bench_with_input(BenchmarkId::from_parameter(cfg.model.resolution(level)), &level, |b, _| {
            b.iter(|| black_box(state.train_step(&batch).unwrap()))
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let cfg = Preset::DeskSynthetic.config();
    let mut model = TrainState::new(cfg.clone()).unwrap().snapshot();
    model.phase = PhaseState::at_level(cfg.model.levels() - 1);
    let z = codes(16, cfg.model.latent_dim, 9);
    c.bench_function("desk_decode_16_top", |b| b.iter(|| black_box(model.decode(&z).unwrap())));
}

criterion_group!(benches, train_step, decode);
criterion_main!(benches);
