//! Sequential vs rayon execution on the two hot paths: one training epoch
//! and batch evaluation. On a single core the parallel rows measure pool
//! overhead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nluadv_core::corpus::{generate_synthetic, SynthSizes, SyntheticGrammar};
use nluadv_core::tagger::train::{evaluate, train};
use nluadv_core::tagger::{TaggerConfig, TrainInputs};
use nluadv_core::Execution;

fn cfg(epochs: usize) -> TaggerConfig {
    TaggerConfig {
        hidden_size: 32,
        embedding_dim: 32,
        num_layers: 1,
        epochs,
        ..TaggerConfig::default()
    }
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench(c: &mut Criterion) {
    let corpus = generate_synthetic(&SyntheticGrammar::builtin(), 0, SynthSizes { train: 400, dev: 0, test: 400 }).unwrap();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, ex) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &ex, |b, &ex| {
            b.iter(|| black_box(train(TrainInputs::new(&corpus.train), &cfg(1), None, ex).unwrap()))
        });
    }
    g.finish();

    let (model, _) = train(TrainInputs::new(&corpus.train), &cfg(1), None, Execution::Parallel).unwrap();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(20);
    for (name, ex) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &ex, |b, &ex| b.iter(|| black_box(evaluate(&model, &corpus.test, ex).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
