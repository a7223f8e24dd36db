//! Monte-Carlo criteria: schedule invariance, variance direction, samplers.

use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::{Options, Verdict};
use crate::data::{MarkovSource, TokenSequence};
use crate::denoiser::{Bd3Model, DenoiserConfig};
use crate::error::{Bd3Error, Result};
use crate::objectives::{exact_nelbo_linear, mean_sd, nelbo_estimate, select_schedule, variance::plan_loss, BatchPlan};
use crate::rng::SplitRng;
use crate::sampling::{
    chi_square_homogeneity, generate, sample_block_ancestral, sample_block_first_hitting, CacheMode, LengthMode, ProductDenoiser,
    SamplerConfig, WithinBlock,
};
use crate::schedule::{default_grid, NoiseSchedule};

fn net(max_len: usize, block_size: usize, seed: u64) -> Result<Bd3Model> {
    let config = DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 6,
        max_len,
        block_size,
    };
    Bd3Model::new(config, &mut SplitRng::new(seed))
}

pub(super) fn schedule_invariance(opts: &Options) -> Result<Verdict> {
    let draws = 100_000;
    let model = net(8, 4, opts.seed ^ 6)?;
    let mut rng = SplitRng::new(opts.seed ^ 60);
    let x = TokenSequence::new((0..8).map(|_| rng.below(5)).collect(), 4)?;
    let mut intervals = Vec::new();
    for s in NoiseSchedule::full_support_kinds() {
        let r = nelbo_estimate(&x, &model, &s, &mut rng, draws)?;
        let (m, se) = (r.total, r.std_error());
        intervals.push((s, m - 3.0 * se, m + 3.0 * se));
    }
    let lo = intervals.iter().map(|i| i.1).fold(f64::NEG_INFINITY, f64::max);
    let hi = intervals.iter().map(|i| i.2).fold(f64::INFINITY, f64::min);
    let exact = exact_nelbo_linear(&x, &model)?.total;
    let listed: Vec<String> = intervals
        .iter()
        .map(|(s, a, b)| format!("{s} {:.4}±{:.4}", 0.5 * (a + b), (b - a) / 6.0))
        .collect();
    Ok(Verdict::new(
        lo <= hi,
        format!("{} (exact {exact:.4}); common overlap [{lo:.4}, {hi:.4}]", listed.join(", ")),
    ))
}

/// Loss values over `n` fresh data batches, each with fresh corruption.
fn loss_samples(
    model: &Bd3Model,
    source: &MarkovSource,
    schedule: &NoiseSchedule,
    bs: usize,
    n: usize,
    rng: &mut SplitRng,
) -> Result<Vec<f64>> {
    let len = model.config.max_len;
    (0..n)
        .map(|_| {
            let batch: Vec<Vec<usize>> = (0..4).map(|_| source.sample(len, rng)).collect();
            let plan = match schedule {
                NoiseSchedule::FullMask => BatchPlan::all_masked(&batch, bs, model.mask_id())?,
                s => BatchPlan::sample(&batch, bs, s, model.mask_id(), rng)?,
            };
            plan_loss(model, &plan)
        })
        .collect()
}

pub(super) fn variance_reduction(opts: &Options) -> Result<Verdict> {
    let mut rng = SplitRng::new(opts.seed ^ 7);
    let source = MarkovSource::random(1, 5, 2.0, &mut rng)?;
    let n = 400;
    let model = net(16, 1, opts.seed ^ 70)?;
    let full = loss_samples(&model, &source, &NoiseSchedule::FullMask, 1, n, &mut rng)?;
    let linear = loss_samples(&model, &source, &NoiseSchedule::Linear, 1, n, &mut rng)?;
    let (vf, vl) = (mean_sd(&full).1.powi(2), mean_sd(&linear).1.powi(2));
    let f = FisherSnedecor::new((n - 1) as f64, (n - 1) as f64).map_err(|e| Bd3Error::Domain(e.to_string()))?;
    let p = f.sf(vl / vf);
    let mut parts = vec![format!(
        "L'=1 variance full-mask {vf:.3e} vs linear {vl:.3e}, one-sided F-test p = {p:.1e}"
    )];
    let mut passed = p < 0.05;

    for bs in [4, 16] {
        let model = net(16, bs, opts.seed ^ (71 + bs as u64))?;
        let batch: Vec<Vec<usize>> = (0..16).map(|_| source.sample(16, &mut rng)).collect();
        let seed = opts.seed ^ (700 + bs as u64);
        let (chosen, scores) = select_schedule(&model, &batch, bs, &default_grid(), 64, seed)?;
        let (_, linear) = select_schedule(&model, &batch, bs, &[NoiseSchedule::Linear], 64, seed)?;
        let best = scores
            .iter()
            .find(|s| s.schedule == chosen)
            .expect("chosen is scored")
            .loss_variance;
        let lin = linear[0].loss_variance;
        let clipped = matches!(chosen, NoiseSchedule::Clipped { .. });
        passed &= clipped && best <= lin;
        parts.push(format!("L'={bs} picked {chosen} variance {best:.3e} <= linear {lin:.3e}"));
    }
    Ok(Verdict::new(passed, parts.join("; ")))
}

fn product_denoiser() -> Result<ProductDenoiser> {
    ProductDenoiser::new(vec![vec![0.5, 0.25, 0.15, 0.1, 0.0], vec![0.1, 0.2, 0.3, 0.4, 0.0]])
}

pub(super) fn sampler_invariants(opts: &Options) -> Result<Verdict> {
    let mut parts = Vec::new();
    let mut passed = true;

    // carry-over and NFE accounting on a small network
    let model = net(32, 4, opts.seed ^ 8)?;
    let (mut blocks, mut remasked) = (0, 0);
    let (mut fh_tokens, mut fh_nfe, mut anc_tokens, mut anc_nfe) = (0, 0, 0, 0);
    for seq in 0..50u64 {
        for sampler in [WithinBlock::FirstHitting, WithinBlock::Ancestral { steps: 16 }] {
            let cfg = SamplerConfig {
                sampler,
                max_blocks: 100,
                seed: opts.seed ^ (80 + seq),
                record_trajectories: true,
                ..SamplerConfig::default()
            };
            let g = generate(&model, &[], &cfg)?;
            for (b, traj) in g.trajectories.iter().enumerate() {
                blocks += 1;
                let committed = &g.tokens[b * 4..(b + 1) * 4];
                let mut prev = vec![model.mask_id(); 4];
                for state in traj {
                    if prev.iter().zip(state).any(|(&p, &s)| p != model.mask_id() && p != s) {
                        remasked += 1;
                    }
                    prev.clone_from(state);
                }
                if prev != committed {
                    remasked += 1;
                }
            }
            match sampler {
                WithinBlock::FirstHitting => {
                    fh_tokens += g.stats.length;
                    fh_nfe += g.stats.nfe;
                }
                WithinBlock::Ancestral { .. } => {
                    anc_tokens += g.stats.length;
                    anc_nfe += g.stats.nfe;
                }
            }
        }
    }
    passed &= blocks >= 10_000 && remasked == 0 && fh_nfe == fh_tokens && anc_nfe <= anc_tokens;
    parts.push(format!(
        "{blocks} blocks, {remasked} remasking events; first-hitting NFE {fh_nfe} for {fh_tokens} tokens; ancestral NFE {anc_nfe} for {anc_tokens} tokens"
    ));

    // first-hitting vs ancestral with T = 10^4 on a context-free denoiser
    let product = product_denoiser()?;
    let n = 100_000;
    let (mut a, mut b) = (vec![0u64; 16], vec![0u64; 16]);
    let mut rng = SplitRng::new(opts.seed ^ 81);
    for _ in 0..n {
        let s = sample_block_first_hitting(&product, &0, 1.0, &mut rng, false)?;
        a[s.tokens[0] * 4 + s.tokens[1]] += 1;
        let s = sample_block_ancestral(&product, &0, 10_000, &NoiseSchedule::Linear, 1.0, &mut rng, false)?;
        b[s.tokens[0] * 4 + s.tokens[1]] += 1;
    }
    let p = chi_square_homogeneity(&a, &b)?;
    passed &= p > 0.01;
    parts.push(format!("first-hitting vs ancestral T=10^4 chi-square p = {p:.3}"));

    // cached vs recomputed conditioning, past the context
    let mut mismatches = 0;
    let mut runs = 0;
    for seed in 0..6u64 {
        let model = net(16, 4, opts.seed ^ (90 + seed))?;
        for sampler in [WithinBlock::FirstHitting, WithinBlock::Ancestral { steps: 32 }] {
            let mut cfg = SamplerConfig {
                sampler,
                max_blocks: 10,
                nucleus: 0.9,
                seed,
                length_mode: LengthMode::Sliding,
                ..SamplerConfig::default()
            };
            let cached = generate(&model, &[], &cfg)?;
            cfg.cache_mode = CacheMode::Recompute;
            let fresh = generate(&model, &[], &cfg)?;
            mismatches += (cached.tokens != fresh.tokens) as usize;
            runs += 1;
        }
    }
    passed &= mismatches == 0;
    parts.push(format!("cache vs recompute: {mismatches}/{runs} runs differ"));
    Ok(Verdict::new(passed, parts.join("; ")))
}
