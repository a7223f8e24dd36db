//! Likelihood objectives: AR NLL, the block NELBO and its estimators.

pub mod batch;
pub mod oracle;
pub mod variance;

use serde::Serialize;

pub use batch::{ar_loss, batch_loss, BaseNoise, BatchLoss, BatchPlan, LossMode};
pub use oracle::MarkovOracle;
pub use variance::{grad_variance, loss_variance, select_schedule, ModelObjective, ScheduleScore, StochasticObjective, VarianceReport};

use crate::data::TokenSequence;
use crate::denoiser::DenoisingModel;
use crate::error::{Bd3Error, Result};
use crate::forward::mask_with_uniforms;
use crate::rng::SplitRng;
use crate::schedule::{NoiseSchedule, TimeDraw};
use crate::tensor::Tensor;

/// Per-block NELBO (or NLL) breakdown in nats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_block: Vec<f64>,
    /// Time draws t(k, b); empty for the AR NLL.
    pub times: Vec<Vec<f64>>,
    pub schedule: Option<NoiseSchedule>,
    pub tokens: usize,
    /// Per-draw sequence totals, for Monte-Carlo error bars.
    pub draw_totals: Vec<f64>,
}

impl LossReport {
    pub fn nats_per_token(&self) -> f64 {
        self.total / self.tokens.max(1) as f64
    }

    pub fn bits_per_token(&self) -> f64 {
        self.nats_per_token() / std::f64::consts::LN_2
    }

    pub fn perplexity(&self) -> f64 {
        self.nats_per_token().exp()
    }

    /// Standard error of `total` from the spread of the per-draw totals,
    /// treating the draws as independent.
    pub fn std_error(&self) -> f64 {
        let (_, sd) = mean_sd(&self.draw_totals);
        sd / (self.draw_totals.len().max(1) as f64).sqrt()
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// −Σ_ℓ log p(x^ℓ | x^{<ℓ}) from next-token log-probabilities `[L, V]`.
pub fn ar_nll(log_probs: &Tensor, x: &[usize]) -> Result<LossReport> {
    if log_probs.rows() != x.len() {
        return Err(Bd3Error::dim(format!(
            "{} rows of log-probabilities for {} tokens",
            log_probs.rows(),
            x.len()
        )));
    }
    let per_block: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(l, &tok)| {
            log_probs
                .row(l)
                .get(tok)
                .map(|lp| -lp)
                .ok_or_else(|| Bd3Error::Vocabulary(format!("token {tok} outside distribution")))
        })
        .collect::<Result<_>>()?;
    let total = per_block.iter().sum();
    Ok(LossReport {
        total,
        per_block,
        times: Vec::new(),
        schedule: None,
        tokens: x.len(),
        draw_totals: vec![total],
    })
}

/// Draws one stratified time per cell, resampling measure-zero degenerate draws.
pub(crate) fn stratified_draws(k: usize, b: usize, schedule: &NoiseSchedule, rng: &mut SplitRng) -> Result<Vec<Vec<TimeDraw>>> {
    let n = (k * b) as f64;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut row = Vec::with_capacity(b);
        for j in 0..b {
            let cell = (i * b + j) as f64;
            row.push(draw_in_stratum(cell, n, schedule, || rng.uniform_open())?);
        }
        out.push(row);
    }
    Ok(out)
}

pub(crate) fn draw_in_stratum(cell: f64, n: f64, schedule: &NoiseSchedule, mut u: impl FnMut() -> f64) -> Result<TimeDraw> {
    for _ in 0..64 {
        let t = ((cell + u()) / n).min(1.0);
        match schedule.draw(t) {
            Err(Bd3Error::DegenerateTime(_)) => continue,
            other => return other,
        }
    }
    Err(Bd3Error::DegenerateTime(cell / n))
}

/// Per-block weighted masked cross-entropy for one corrupted copy of `x`.
pub(crate) fn block_losses(
    model: &dyn DenoisingModel,
    x: &[usize],
    noisy: &[usize],
    weights_by_block: &[f64],
    block_size: usize,
) -> Result<Vec<f64>> {
    let mask = model.mask_id();
    let lp = model.block_log_probs(x, noisy, block_size)?;
    let mut out = vec![0.0; weights_by_block.len()];
    for (l, (&tok, &z)) in x.iter().zip(noisy).enumerate() {
        if z != mask {
            continue;
        }
        let b = l / block_size;
        out[b] -= weights_by_block[b] * lp.row(l)[tok];
    }
    Ok(out)
}

/// Monte-Carlo block NELBO of `x` with `k` corrupted copies (stratified
/// times over the k × B grid).
pub fn nelbo_estimate(
    x: &TokenSequence,
    model: &dyn DenoisingModel,
    schedule: &NoiseSchedule,
    rng: &mut SplitRng,
    k: usize,
) -> Result<LossReport> {
    if k == 0 {
        return Err(Bd3Error::Contract("need at least one draw".into()));
    }
    crate::data::check_clean(x.ids(), model.vocab_size())?;
    let bs = x.block_size();
    let b = x.num_blocks();
    let draws = stratified_draws(k, b, schedule, rng)?;
    let mut per_block = vec![0.0; b];
    let mut draw_totals = Vec::with_capacity(k);
    let mut times = Vec::with_capacity(k);
    for row in &draws {
        let mut noisy = Vec::with_capacity(x.len());
        for (blk, d) in row.iter().enumerate() {
            let u: Vec<f64> = (0..bs).map(|_| rng.uniform()).collect();
            noisy.extend(mask_with_uniforms(x.block(blk), d.mask_prob, &u, model.mask_id()).0);
        }
        let weights: Vec<f64> = row.iter().map(TimeDraw::loss_weight).collect();
        let losses = block_losses(model, x.ids(), &noisy, &weights, bs)?;
        for (acc, l) in per_block.iter_mut().zip(&losses) {
            *acc += l / k as f64;
        }
        draw_totals.push(losses.iter().sum());
        times.push(row.iter().map(|d| d.t).collect());
    }
    Ok(LossReport {
        total: per_block.iter().sum(),
        per_block,
        times,
        schedule: Some(*schedule),
        tokens: x.len(),
        draw_totals,
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Exact block NELBO under the linear schedule: every nonempty mask pattern
/// S of a block weighted by ∫₀¹ t^{|S|−1}(1−t)^{L′−|S|} dt.
pub fn exact_nelbo_linear(x: &TokenSequence, model: &dyn DenoisingModel) -> Result<LossReport> {
    let bs = x.block_size();
    if bs > 16 {
        return Err(Bd3Error::config("exact NELBO enumerates 2^L' patterns; block size too large"));
    }
    crate::data::check_clean(x.ids(), model.vocab_size())?;
    let mask = model.mask_id();
    let b = x.num_blocks();
    let mut per_block = vec![0.0; b];
    // The same pattern applied to every block at once: block outputs depend
    // only on their own noisy tokens and earlier clean blocks.
    for pattern in 1u32..(1 << bs) {
        let m = pattern.count_ones() as usize;
        let coeff = factorial(m - 1) * factorial(bs - m) / factorial(bs);
        let noisy: Vec<usize> = x
            .ids()
            .iter()
            .enumerate()
            .map(|(l, &tok)| if pattern >> (l % bs) & 1 == 1 { mask } else { tok })
            .collect();
        let losses = block_losses(model, x.ids(), &noisy, &vec![coeff; b], bs)?;
        for (acc, l) in per_block.iter_mut().zip(losses) {
            *acc += l;
        }
    }
    let total = per_block.iter().sum();
    Ok(LossReport {
        total,
        per_block,
        times: Vec::new(),
        schedule: Some(NoiseSchedule::Linear),
        tokens: x.len(),
        draw_totals: vec![total],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub nats_per_token: f64,
    pub perplexity: f64,
    /// Standard error of `nats_per_token` across sequences.
    pub std_error: f64,
    pub sequences: usize,
    pub tokens: usize,
}

impl EvalReport {
    /// 3σ confidence interval on nats per token.
    pub fn ci3(&self) -> (f64, f64) {
        (
            self.nats_per_token - 3.0 * self.std_error,
            self.nats_per_token + 3.0 * self.std_error,
        )
    }
}

/// NELBO per token under the linear schedule, whatever the training schedule.
pub fn eval_nelbo_linear(
    model: &dyn DenoisingModel,
    dataset: &[Vec<usize>],
    block_size: usize,
    draws: usize,
    rng: &mut SplitRng,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Bd3Error::Data("empty evaluation set".into()));
    }
    let mut per_seq = Vec::with_capacity(dataset.len());
    let mut tokens = 0;
    for seq in dataset {
        let x = TokenSequence::new(seq.clone(), block_size)?;
        let r = nelbo_estimate(&x, model, &NoiseSchedule::Linear, rng, draws)?;
        per_seq.push(r.nats_per_token());
        tokens += seq.len();
    }
    let (mean, sd) = mean_sd(&per_seq);
    Ok(EvalReport {
        nats_per_token: mean,
        perplexity: mean.exp(),
        std_error: sd / (per_seq.len() as f64).sqrt(),
        sequences: per_seq.len(),
        tokens,
    })
}

#[cfg(test)]
mod tests;
