//! Inference and training throughput. Run once with default features
//! (rayon) and once with `--no-default-features` (sequential) to compare:
//!
//! ```text
//! cargo bench -p spotlighter-core --bench inference
//! cargo bench -p spotlighter-core --bench inference --no-default-features
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use spotlighter::features::{generate_base_novel, SynthSpec};
use spotlighter::pipeline::{predict_all, train, PredictOptions, RunConfig, TrainedState};

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_predict(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let episode = generate_base_novel(&spec, 1, 20).unwrap();
    let cfg = RunConfig::default();
    let state = TrainedState::init(&cfg, &episode.base_test.text_embeddings).unwrap();
    let workload = &episode.base_test;

    let mut group = c.benchmark_group(format!("predict/{}", mode()));
    group.sample_size(10);
    group.throughput(Throughput::Elements(workload.len() as u64));
    for k in [4, 8, 16, 32] {
        let opts = PredictOptions { k, ..PredictOptions::from_state(&state) };
        group.bench_with_input(BenchmarkId::from_parameter(k), &opts, |b, opts| {
            b.iter(|| predict_all(black_box(&state), workload, &state.bank, *opts).unwrap())
        });
    }
    group.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let spec = SynthSpec { n_classes: 5, ..SynthSpec::default() };
    let episode = generate_base_novel(&spec, 4, 1).unwrap();
    let cfg = RunConfig { epochs: 1, ..RunConfig::default() };

    let mut group = c.benchmark_group(format!("train_epoch/{}", mode()));
    group.sample_size(10);
    group.throughput(Throughput::Elements(episode.base_train.len() as u64));
    group.bench_function("20_items", |b| b.iter(|| train(black_box(&cfg), &episode.base_train).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_predict, bench_train_epoch);
criterion_main!(benches);
