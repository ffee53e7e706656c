use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sdmprune_core::importance::{baseline_scores, taylor_scores, Aggregation, CriterionKind, LossKind, Teacher};
use sdmprune_core::losses::DistillConfig;
use sdmprune_core::model::{ModelConfig, TransformerWeights};

fn scoring(c: &mut Criterion) {
    let config = ModelConfig::tiny();
    let weights = TransformerWeights::init(&config, 0).unwrap();
    let batches: Vec<Vec<Vec<u32>>> = (0..2)
        .map(|k| {
            (0..8)
                .map(|b| (0..64).map(|t| ((k * 13 + b * 31 + t * 7) % config.vocab_size) as u32).collect())
                .collect()
        })
        .collect();
    let teacher = Teacher {
        weights: &weights,
        config: &config,
    };
    let mut group = c.benchmark_group("neuron_scores_2x8x64");
    group.sample_size(20);
    group.bench_function("taylor_hard", |b| {
        b.iter(|| {
            black_box(taylor_scores(&weights, &config, &batches, LossKind::Hard, None, Aggregation::AbsThenMean).unwrap())
        })
    });
    group.bench_function("taylor_distill", |b| {
        b.iter(|| {
            let loss = LossKind::Distill(DistillConfig::default());
            black_box(
                taylor_scores(&weights, &config, &batches, loss, Some(teacher), Aggregation::AbsThenMean).unwrap(),
            )
        })
    });
    group.bench_function("activation_weighted", |b| {
        b.iter(|| {
            black_box(baseline_scores(&weights, &config, &batches, CriterionKind::ActivationWeighted).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
