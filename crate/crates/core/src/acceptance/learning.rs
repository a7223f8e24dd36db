//! Criteria that train small models, plus the timing directions.

use super::{Options, Verdict};
use crate::data::{MarkovSource, TokenSequence};
use crate::denoiser::{Bd3Model, DenoiserConfig, DenoisingModel};
use crate::error::Result;
use crate::objectives::{exact_nelbo_linear, mean_sd, LossMode};
use crate::perf::{bench_model, time_attention, time_train_step};
use crate::rng::SplitRng;
use crate::sampling::{generate, LengthMode, SamplerConfig, StopReason, WithinBlock};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamW, AdamWConfig};
use crate::training::train_step;

/// Exact linear-schedule NELBO per token over a dataset, with the standard
/// error across sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactEval {
    pub nats_per_token: f64,
    pub std_error: f64,
    pub sequences: usize,
}

pub fn exact_eval(model: &dyn DenoisingModel, dataset: &[Vec<usize>], block_size: usize) -> Result<ExactEval> {
    let per_seq = dataset
        .iter()
        .map(|x| Ok(exact_nelbo_linear(&TokenSequence::new(x.clone(), block_size)?, model)?.total / x.len() as f64))
        .collect::<Result<Vec<f64>>>()?;
    let (m, sd) = mean_sd(&per_seq);
    Ok(ExactEval {
        nats_per_token: m,
        std_error: sd / (per_seq.len() as f64).sqrt(),
        sequences: per_seq.len(),
    })
}

fn small_config(max_len: usize, block_size: usize) -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 6,
        max_len,
        block_size,
    }
}

/// Trains on fresh source samples each step with the linear schedule.
fn train_on_source(source: &MarkovSource, config: DenoiserConfig, steps: usize, batch: usize, seed: u64) -> Result<Bd3Model> {
    let mut model = Bd3Model::new(config, &mut SplitRng::new(seed))?;
    let optim = AdamWConfig {
        lr: 1e-3,
        warmup_steps: 100,
        clip_norm: Some(1.0),
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(optim, &model.params);
    let mut data = SplitRng::stream(seed, 1);
    let mut noise = SplitRng::stream(seed, 2);
    for _ in 0..steps {
        let b: Vec<Vec<usize>> = (0..batch).map(|_| source.sample(config.max_len, &mut data)).collect();
        train_step(
            &mut model,
            &mut opt,
            &b,
            &NoiseSchedule::Linear,
            config.block_size,
            LossMode::Vectorized,
            &mut noise,
        )?;
    }
    Ok(model)
}

pub(super) fn upper_bound_vs_oracle(opts: &Options) -> Result<Verdict> {
    let len = 16;
    let mut rng = SplitRng::new(opts.seed ^ 4);
    let source = MarkovSource::random(1, 5, 2.0, &mut rng)?;
    let h = source.per_token_entropy(len);
    let val: Vec<Vec<usize>> = (0..256).map(|_| source.sample(len, &mut rng)).collect();
    let mut passed = true;
    let mut parts = vec![format!("source entropy {h:.4} nats/token")];
    for bs in [1, 2, 4, 8] {
        let model = train_on_source(&source, small_config(len, bs), 5000, 16, opts.seed ^ (40 + bs as u64))?;
        let ev = exact_eval(&model, &val, bs)?;
        let gap = ev.nats_per_token - h;
        let ok = ev.nats_per_token >= h - 3.0 * ev.std_error && gap <= 0.15;
        passed &= ok;
        parts.push(format!("L'={bs} NELBO {:.4}±{:.4} gap {gap:+.4}", ev.nats_per_token, ev.std_error));
    }
    Ok(Verdict::new(passed, parts.join("; ")))
}

pub(super) fn variable_length(opts: &Options) -> Result<Verdict> {
    let (len, bs) = (64, 4);
    let mut rng = SplitRng::new(opts.seed ^ 9);
    let source = MarkovSource::random(1, 5, 2.0, &mut rng)?;
    let model = train_on_source(&source, small_config(len, bs), 1500, 8, opts.seed ^ 90)?;
    let nll = |x: &[usize]| -> Result<f64> { Ok(source.exact_nll(x)? / x.len() as f64) };
    let (mut short, mut long, mut longest, mut fixed_max) = (Vec::new(), Vec::new(), 0, 0);
    let mut fixed_stops = true;
    for s in 0..16u64 {
        let base = SamplerConfig {
            sampler: WithinBlock::FirstHitting,
            seed: opts.seed ^ (900 + s),
            ..SamplerConfig::default()
        };
        let g = generate(
            &model,
            &[],
            &SamplerConfig {
                max_blocks: 32,
                ..base.clone()
            },
        )?;
        longest = longest.max(g.stats.length);
        long.push(nll(&g.tokens)?);
        let f = generate(
            &model,
            &[],
            &SamplerConfig {
                max_blocks: 32,
                length_mode: LengthMode::Fixed,
                seed: base.seed ^ 1,
                ..base
            },
        )?;
        fixed_max = fixed_max.max(f.stats.length);
        fixed_stops &= f.stats.stop_reason == StopReason::ContextLimit;
        short.push(nll(&f.tokens)?);
    }
    let (ms, ml) = (mean_sd(&short).0, mean_sd(&long).0);
    let passed = longest >= 128 && (ml - ms).abs() <= 0.3 && fixed_max <= len && fixed_stops;
    Ok(Verdict::new(
        passed,
        format!(
            "sliding samples of {longest} tokens: oracle NLL {ml:.4}/token vs {ms:.4} at training length (|diff| {:.4} <= 0.3); fixed mode max length {fixed_max}",
            (ml - ms).abs()
        ),
    ))
}

pub(super) fn performance_directions(opts: &Options) -> Result<Verdict> {
    let model = bench_model(512, 16, opts.seed ^ 10)?;
    let two = time_train_step(&model, LossMode::TwoPass, 1, 5, opts.seed)?.median();
    let vec = time_train_step(&model, LossMode::Vectorized, 1, 5, opts.seed)?.median();
    let (dense, sparse) = time_attention(1024, 16, 32, 2, 3, opts.seed)?;
    let (dense, sparse) = (dense.median(), sparse.median());
    Ok(Verdict::new(
        vec < two && sparse <= dense,
        format!(
            "L=512 L'=16 step: vectorized {:.1} ms vs two-pass {:.1} ms; L=1024 L'=16 attention: sparse {:.1} ms vs dense {:.1} ms",
            vec * 1e3,
            two * 1e3,
            sparse * 1e3,
            dense * 1e3
        ),
    ))
}
