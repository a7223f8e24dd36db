use super::*;
use crate::data::MarkovSource;
use crate::denoiser::{Bd3Model, DenoiserConfig};
use crate::objectives::MarkovOracle;

fn product(rows: &[&[f64]]) -> ProductDenoiser {
    ProductDenoiser::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

fn repeated(row: &[f64], n: usize) -> ProductDenoiser {
    ProductDenoiser::new(vec![row.to_vec(); n]).unwrap()
}

fn block_index(tokens: &[usize], symbols: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * symbols + t)
}

#[test]
fn gumbel_point_mass_and_uniform() {
    let mut rng = SplitRng::new(1);
    let lp = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
    for _ in 0..100 {
        assert_eq!(gumbel_categorical(&lp, &mut rng).unwrap(), 1);
        assert_eq!(gumbel_categorical_f32(&lp, &mut rng).unwrap(), 1);
    }
    let n = 40_000;
    let mut counts = [0u64; 4];
    for _ in 0..n {
        counts[gumbel_categorical(&[0.0; 4], &mut rng).unwrap()] += 1;
    }
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd, "{counts:?}");
    }
    assert!(gumbel_categorical(&[f64::NEG_INFINITY; 3], &mut rng).is_err());
    assert!(gumbel_categorical(&[0.0, f64::NAN], &mut rng).is_err());
}

#[test]
fn f32_gumbel_undersamples_rare_tokens() {
    // P(token 1) = e^-20 / (1 + e^-20); the 32-bit tail cannot reach a gap of 20
    let lp = [0.0, -20.0];
    let mut rng = SplitRng::new(2);
    let hits = (0..200_000).filter(|_| gumbel_categorical_f32(&lp, &mut rng).unwrap() == 1).count();
    assert_eq!(hits, 0);
    // the 64-bit version at a reachable gap matches its probability
    let lp = [0.0, -4.0];
    let p = (-4.0f64).exp() / (1.0 + (-4.0f64).exp());
    let n = 200_000;
    let hits = (0..n).filter(|_| gumbel_categorical(&lp, &mut rng).unwrap() == 1).count() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - n as f64 * p).abs() < 4.0 * sd);
}

fn empirical_entropy(draws: &[usize]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for &d in draws {
        *counts.entry(d).or_insert(0usize) += 1;
    }
    let n = draws.len() as f64;
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

#[test]
fn f64_gumbel_keeps_more_entropy_on_a_heavy_tail() {
    // one head token and 5000 tail tokens 17 nats below it
    let mut lp = vec![-17.0; 5001];
    lp[0] = 0.0;
    let mut rng = SplitRng::new(1);
    let wide: Vec<usize> = (0..20_000).map(|_| gumbel_categorical(&lp, &mut rng).unwrap()).collect();
    let narrow: Vec<usize> = (0..20_000).map(|_| gumbel_categorical_f32(&lp, &mut rng).unwrap()).collect();
    assert!(empirical_entropy(&wide) > empirical_entropy(&narrow));
}

#[test]
fn nucleus_examples() {
    let out = nucleus_filter(&[0.5, 0.3, 0.2], 0.8).unwrap();
    for (a, b) in out.iter().zip([0.625, 0.375, 0.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(nucleus_filter(&[0.2, 0.5, 0.3], 0.4).unwrap(), vec![0.0, 1.0, 0.0]);
    // ties break toward the lower id
    assert_eq!(nucleus_filter(&[0.25; 4], 0.5).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
    let full = nucleus_filter(&[1.0, 3.0], 1.0).unwrap();
    assert_eq!(full, vec![0.25, 0.75]);
    assert!(nucleus_filter(&[0.5, 0.5], 0.0).is_err());
    assert!(nucleus_filter(&[0.5, 0.5], 1.5).is_err());
    assert!(nucleus_filter(&[0.0, 0.0], 0.5).is_err());
}

#[test]
fn sampler_names_parse() {
    assert_eq!(WithinBlock::parse("first-hitting").unwrap(), WithinBlock::FirstHitting);
    assert_eq!(
        WithinBlock::parse("ancestral:5000").unwrap(),
        WithinBlock::Ancestral { steps: 5000 }
    );
    assert!(WithinBlock::parse("ancestral:0").is_err());
    assert!(WithinBlock::parse("ancestral").is_err());
    assert!(WithinBlock::parse("greedy").is_err());
}

#[test]
fn ancestral_single_step_reveals_everything_at_once() {
    let m = product(&[&[0.5, 0.5, 0.0], &[0.1, 0.9, 0.0], &[1.0, 0.0, 0.0]]);
    let mut rng = SplitRng::new(3);
    let s = sample_block_ancestral(&m, &0, 1, &NoiseSchedule::Linear, 1.0, &mut rng, true).unwrap();
    assert_eq!(s.nfe, 1);
    assert_eq!(s.trajectory.len(), 1);
    assert!(s.tokens.iter().all(|&t| t < 2));
    assert_eq!(s.tokens[2], 0);
    assert_eq!(s.reveal_step, vec![1; 3]);
}

#[test]
fn ancestral_never_remasks_and_calls_at_most_block_size_times() {
    let m = repeated(&[0.3, 0.3, 0.4, 0.0], 6);
    let mut rng = SplitRng::new(4);
    for _ in 0..200 {
        let s = sample_block_ancestral(&m, &0, 50, &NoiseSchedule::Linear, 1.0, &mut rng, true).unwrap();
        assert!(s.nfe <= 6 && s.nfe >= 1);
        for w in s.trajectory.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(*a == 3 || a == b, "token changed after reveal");
            }
        }
        assert!(s.tokens.iter().all(|&t| t != 3));
    }
}

#[test]
fn ancestral_reveal_times_are_uniform_under_linear() {
    // each position's reveal step is uniform on 1..=T under the linear schedule
    let m = repeated(&[0.5, 0.5, 0.0], 4);
    let steps = 10;
    let mut counts = vec![0u64; steps];
    let mut rng = SplitRng::new(5);
    for _ in 0..5_000 {
        let s = sample_block_ancestral(&m, &0, steps, &NoiseSchedule::Linear, 1.0, &mut rng, false).unwrap();
        for j in s.reveal_step {
            counts[j - 1] += 1;
        }
    }
    let p = chi_square_goodness(&counts, &vec![1.0 / steps as f64; steps]).unwrap();
    assert!(p > 1e-3, "p = {p}, counts {counts:?}");
}

#[test]
fn first_hitting_uses_one_call_per_token() {
    let m = repeated(&[0.2, 0.8, 0.0], 5);
    let mut rng = SplitRng::new(6);
    for _ in 0..50 {
        let s = sample_block_first_hitting(&m, &0, 1.0, &mut rng, true).unwrap();
        assert_eq!(s.nfe, 5);
        assert_eq!(s.trajectory.len(), 5);
        let mut steps = s.reveal_step.clone();
        steps.sort_unstable();
        assert_eq!(steps, vec![1, 2, 3, 4, 5]);
        // reveal times decrease with the call index
        let mut by_step: Vec<(usize, f64)> = s.reveal_step.iter().copied().zip(s.reveal_time.iter().copied()).collect();
        by_step.sort_by_key(|p| p.0);
        assert!(by_step.windows(2).all(|w| w[1].1 < w[0].1));
    }
}

#[test]
fn first_hitting_matches_ancestral_on_product_denoiser() {
    let rows: [&[f64]; 3] = [&[0.6, 0.3, 0.1, 0.0], &[0.2, 0.2, 0.6, 0.0], &[0.3, 0.4, 0.3, 0.0]];
    let m = product(&rows);
    let n = 20_000;
    let (mut a, mut b) = (vec![0u64; 27], vec![0u64; 27]);
    let mut rng = SplitRng::new(7);
    for _ in 0..n {
        let s = sample_block_first_hitting(&m, &0, 1.0, &mut rng, false).unwrap();
        a[block_index(&s.tokens, 3)] += 1;
        let s = sample_block_ancestral(&m, &0, 100, &NoiseSchedule::Linear, 1.0, &mut rng, false).unwrap();
        b[block_index(&s.tokens, 3)] += 1;
    }
    assert!(chi_square_homogeneity(&a, &b).unwrap() > 1e-3);
    let joint: Vec<f64> = (0..27).map(|i| rows[0][i / 9] * rows[1][(i / 3) % 3] * rows[2][i % 3]).collect();
    assert!(chi_square_goodness(&a, &joint).unwrap() > 1e-3);
}

#[test]
fn chi_square_helpers() {
    assert!(chi_square_goodness(&[500, 500], &[0.5, 0.5]).unwrap() > 0.99);
    assert!(chi_square_goodness(&[900, 100], &[0.5, 0.5]).unwrap() < 1e-10);
    assert!(chi_square_homogeneity(&[100, 200, 300], &[100, 200, 300]).unwrap() > 0.99);
    assert!(chi_square_homogeneity(&[300, 200, 100], &[100, 200, 300]).unwrap() < 1e-10);
    assert!(chi_square_goodness(&[1], &[0.5, 0.5]).is_err());
}

#[test]
fn bad_denoiser_rows_are_rejected() {
    assert!(ProductDenoiser::new(vec![vec![0.5, 0.4, 0.0]]).is_err());
    assert!(ProductDenoiser::new(vec![vec![0.5, 0.0, 0.5]]).is_err());
    assert!(ProductDenoiser::new(vec![]).is_err());
}

fn tiny_model(seed: u64, block_size: usize, max_len: usize) -> Bd3Model {
    let config = DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 5,
        max_len,
        block_size,
    };
    Bd3Model::new(config, &mut SplitRng::new(seed)).unwrap()
}

#[test]
fn cached_and_recomputed_generation_agree_exactly() {
    for (seed, sampler) in [(0, WithinBlock::FirstHitting), (1, WithinBlock::Ancestral { steps: 20 })] {
        let model = tiny_model(seed, 4, 16);
        let mut cfg = SamplerConfig {
            sampler,
            max_blocks: 8,
            seed,
            nucleus: 0.9,
            ..SamplerConfig::default()
        };
        let a = generate(&model, &[], &cfg).unwrap();
        cfg.cache_mode = CacheMode::Recompute;
        let b = generate(&model, &[], &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.stats.nfe, b.stats.nfe);
        assert_eq!(a.stats.length, 32);
        assert!(a.stats.state_rebuilds >= 4);
    }
}

#[test]
fn fixed_length_stops_at_the_context() {
    let model = tiny_model(2, 4, 16);
    let cfg = SamplerConfig {
        max_blocks: 10,
        length_mode: LengthMode::Fixed,
        ..SamplerConfig::default()
    };
    let g = generate(&model, &[], &cfg).unwrap();
    assert_eq!(g.stats.length, 16);
    assert_eq!(g.stats.stop_reason, StopReason::ContextLimit);
    let g = generate(&model, &[0, 1, 2, 3], &cfg).unwrap();
    assert_eq!(g.tokens.len(), 16);
    assert_eq!(&g.tokens[..4], &[0, 1, 2, 3]);
}

#[test]
fn sliding_generation_passes_the_context() {
    let model = tiny_model(3, 4, 16);
    let cfg = SamplerConfig {
        max_blocks: 10,
        ..SamplerConfig::default()
    };
    let g = generate(&model, &[], &cfg).unwrap();
    assert_eq!(g.stats.length, 40);
    assert_eq!(g.stats.stop_reason, StopReason::MaxBlocks);
    assert_eq!(g.stats.nfe, 40);
    assert!(g.tokens.iter().all(|&t| t < 4));
}

#[test]
fn eos_truncates_and_stops() {
    let m = product(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    let cfg = SamplerConfig {
        eos: Some(0),
        max_blocks: 5,
        ..SamplerConfig::default()
    };
    let g = generate(&m, &[], &cfg).unwrap();
    assert_eq!(g.tokens, vec![1, 0]);
    assert_eq!(g.stats.stop_reason, StopReason::Eos);
    assert_eq!(g.stats.blocks, 1);
}

#[test]
fn entropy_rule_flags_degenerate_output() {
    let m = repeated(&[1.0, 0.0, 0.0], 4);
    let cfg = SamplerConfig {
        entropy_stop: Some(EntropyStop { threshold: 0.5, window: 8 }),
        max_blocks: 10,
        ..SamplerConfig::default()
    };
    let g = generate(&m, &[], &cfg).unwrap();
    assert_eq!(g.stats.stop_reason, StopReason::Entropy);
    assert!(g.stats.degenerate);
    assert_eq!(g.stats.length, 8);
    assert_eq!(g.stats.entropy_trace.len(), 2);

    let m = repeated(&[0.5, 0.5, 0.0], 4);
    let g = generate(&m, &[], &cfg).unwrap();
    assert_eq!(g.stats.stop_reason, StopReason::MaxBlocks);
    assert!(g.stats.entropy_trace.iter().all(|&h| (h - 2f64.ln()).abs() < 1e-12));
}

#[test]
fn zero_blocks_and_bad_prompts() {
    let model = tiny_model(4, 4, 16);
    let g = generate(
        &model,
        &[],
        &SamplerConfig {
            max_blocks: 0,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    assert!(g.generated().is_empty());
    assert_eq!(g.stats.stop_reason, StopReason::MaxBlocks);
    assert!(generate(&model, &[0, 1], &SamplerConfig::default()).is_err());
    assert!(generate(
        &model,
        &[],
        &SamplerConfig {
            nucleus: 0.0,
            ..SamplerConfig::default()
        }
    )
    .is_err());
}

#[test]
fn oracle_generation_follows_the_source() {
    let mut t = vec![0.05; 9];
    for c in 0..3 {
        t[c * 3 + (c + 1) % 3] = 0.9;
    }
    let source = MarkovSource::new(1, 3, t).unwrap();
    let oracle = MarkovOracle::new(source, 4).unwrap();
    let cfg = SamplerConfig {
        max_blocks: 200,
        seed: 9,
        ..SamplerConfig::default()
    };
    let g = generate(&oracle, &[], &cfg).unwrap();
    let follows = g.tokens.windows(2).filter(|w| w[1] == (w[0] + 1) % 3).count() as f64;
    let frac = follows / (g.tokens.len() - 1) as f64;
    assert!((frac - 0.9).abs() < 0.03, "fraction {frac}");
}
