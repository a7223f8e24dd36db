use std::hint::black_box;

use bd3lm::masks::{attention::attention_forward, dense_attention_reference};
use bd3lm::objectives::LossMode;
use bd3lm::sampling::{generate, SamplerConfig, WithinBlock};
use bd3lm::schedule::NoiseSchedule;
use bd3lm::tensor::{AdamW, AdamWConfig};
use bd3lm::training::train_step;
use bd3lm::SplitRng;
use bd3lm_bench::{bench_model, random_batch, AttentionFixture};
use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for len in [256, 1024] {
        let f = AttentionFixture::new(len, 16, 32, 2, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("dense", len), &f, |b, f| {
            b.iter(|| dense_attention_reference(black_box(&f.q), &f.k, &f.v, f.dims, &f.mask).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sparse", len), &f, |b, f| {
            b.iter(|| attention_forward(black_box(&f.q), &f.k, &f.v, f.dims, &f.mask, &f.tiles).unwrap())
        });
    }
    group.finish();
}

fn train_steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let len = 512;
    let model = bench_model(len, 16, 0).unwrap();
    let batch = random_batch(len, model.mask_id(), 1, 1);
    for (name, mode) in [("two_pass", LossMode::TwoPass), ("vectorized", LossMode::Vectorized)] {
        let mut warm = model.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &warm.params);
        train_step(&mut warm, &mut opt, &batch, &NoiseSchedule::Linear, 16, mode, &mut SplitRng::new(2)).unwrap();
        group.bench_function(BenchmarkId::new(name, len), |b| {
            b.iter_batched(
                || {
                    let opt = AdamW::new(AdamWConfig::default(), &warm.params);
                    (warm.clone(), opt, SplitRng::new(3))
                },
                |(mut m, mut opt, mut rng)| train_step(&mut m, &mut opt, &batch, &NoiseSchedule::Linear, 16, mode, &mut rng).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_64_tokens");
    let model = bench_model(64, 4, 0).unwrap();
    for (name, sampler) in [
        ("first_hitting", WithinBlock::FirstHitting),
        ("ancestral_16", WithinBlock::Ancestral { steps: 16 }),
    ] {
        let cfg = SamplerConfig {
            sampler,
            max_blocks: 16,
            ..SamplerConfig::default()
        };
        group.bench_function(name, |b| b.iter(|| generate(&model, &[], black_box(&cfg)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, attention, train_steps, sampling);
criterion_main!(benches);
