use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use amer_core::assignment::{hungarian, CostMatrix};
use amer_core::evaluate::decode_dataset;
use amer_core::model::{init_model, ModelConfig, ModelParams, StepInputPolicy};
use amer_core::synthgen::{build_corpus, build_dataset, DataConfig};
use amer_core::tensor::{gaussian_vec, normalize, RngStream, UnitVector};
use amer_core::trainer::{batch_step, PreparedSplit, TrainConfig, TrainMode};
use amer_core::FlatIndex;

fn bench_hungarian(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0).rng();
    for m in [5, 8] {
        let cost = CostMatrix::new(m, gaussian_vec(&mut rng, m * m)).unwrap();
        c.bench_function(&format!("hungarian m={m}"), |b| {
            b.iter(|| hungarian(black_box(&cost)))
        });
    }
}

fn desk() -> (amer_core::synthgen::GeneratedData, ModelConfig) {
    let dc = DataConfig::default();
    (build_dataset(&dc, 0).unwrap(), ModelConfig::default())
}

fn bench_search(c: &mut Criterion) {
    let (data, _) = desk();
    let corpus = build_corpus(&data.pool, 20_000, 0).unwrap();
    let index = FlatIndex::build(&corpus).unwrap();
    let mut rng = RngStream::new(2, 0).rng();
    let queries: Vec<UnitVector> = (0..100)
        .map(|_| {
            normalize(
                &gaussian_vec(&mut rng, 64)
                    .iter()
                    .map(|&x| x as f32)
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        })
        .collect();
    c.bench_function("search 100 queries, 20k x 64, k=100", |b| {
        b.iter(|| index.batch_search(black_box(&queries), 100).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (data, mc) = desk();
    let split = PreparedSplit::new(&data.train).unwrap();
    let params: ModelParams<f32> = init_model(&mc, RngStream::new(3, 0)).unwrap();
    let tc = TrainConfig::default();
    let rows: Vec<usize> = (0..tc.batch_size).collect();
    let mut group = c.benchmark_group("train step b=128");
    group.sample_size(10);
    for (name, mode) in [
        ("amer", TrainMode::Amer),
        ("single-query", TrainMode::SingleQuery),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                batch_step(
                    &params,
                    &split,
                    &rows,
                    mode,
                    StepInputPolicy::ScheduledSampling(0.5),
                    &tc,
                    RngStream::new(4, 0),
                    true,
                )
                .unwrap()
            })
        });
    }
    group.finish();
    c.bench_function("decode 200 queries, m_pred=5", |b| {
        b.iter(|| decode_dataset(&params, black_box(&data.test), 5).unwrap())
    });
}

criterion_group!(benches, bench_hungarian, bench_search, bench_train_step);
criterion_main!(benches);
