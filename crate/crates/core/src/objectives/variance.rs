//! Estimator variance and data-driven schedule selection.

use serde::Serialize;

use super::batch::{batch_loss, BaseNoise, BatchPlan, LossMode};
use super::{block_losses, mean_sd};
use crate::denoiser::{Bd3Model, DenoisingModel};
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;

/// A loss with a random gradient estimate; `draw` indexes the randomness.
pub trait StochasticObjective {
    fn num_params(&self) -> usize;

    fn sample(&mut self, draw: usize) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceReport {
    pub draws: usize,
    pub loss_mean: f64,
    pub loss_variance: f64,
    /// Trace of the gradient covariance: Σ_j Var[g_j].
    pub grad_variance: f64,
    /// The trace divided by the parameter count.
    pub grad_variance_per_param: f64,
    pub grad_mean_norm: f64,
}

/// Sample variances over `draws` independent evaluations.
pub fn grad_variance(obj: &mut dyn StochasticObjective, draws: usize) -> Result<VarianceReport> {
    if draws < 2 {
        return Err(Bd3Error::Contract("variance needs at least two draws".into()));
    }
    let p = obj.num_params();
    let mut losses = Vec::with_capacity(draws);
    let mut sum = vec![0.0; p];
    let mut sum_sq = vec![0.0; p];
    for m in 0..draws {
        let (l, g) = obj.sample(m)?;
        if g.len() != p {
            return Err(Bd3Error::dim(format!("gradient of length {} for {p} parameters", g.len())));
        }
        losses.push(l);
        for ((s, q), x) in sum.iter_mut().zip(&mut sum_sq).zip(&g) {
            *s += x;
            *q += x * x;
        }
    }
    let n = draws as f64;
    let grad_variance = sum.iter().zip(&sum_sq).map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0)).sum();
    let grad_mean_norm = sum.iter().map(|s| (s / n) * (s / n)).sum::<f64>().sqrt();
    let (loss_mean, loss_sd) = mean_sd(&losses);
    Ok(VarianceReport {
        draws,
        loss_mean,
        loss_variance: loss_sd * loss_sd,
        grad_variance,
        grad_variance_per_param: grad_variance / p.max(1) as f64,
        grad_mean_norm,
    })
}

/// The minibatch NELBO of a denoiser, with fresh corruption per draw.
pub struct ModelObjective<'a> {
    pub model: &'a Bd3Model,
    pub batches: &'a [Vec<Vec<usize>>],
    pub schedule: NoiseSchedule,
    pub block_size: usize,
    pub seed: u64,
    pub mode: LossMode,
}

impl StochasticObjective for ModelObjective<'_> {
    fn num_params(&self) -> usize {
        self.model.params.num_scalars()
    }

    fn sample(&mut self, draw: usize) -> Result<(f64, Vec<f64>)> {
        if self.batches.is_empty() {
            return Err(Bd3Error::Data("no batches".into()));
        }
        let batch = &self.batches[draw % self.batches.len()];
        let mut rng = SplitRng::new(self.seed ^ (draw as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let plan = BatchPlan::sample(batch, self.block_size, &self.schedule, self.model.mask_id(), &mut rng)?;
        let (loss, grads) = batch_loss(self.model, &plan, self.mode, true)?;
        Ok((loss.loss, grads.expect("requested").flatten(&self.model.params)))
    }
}

/// Value of the minibatch objective for one corruption (no gradient).
pub(crate) fn plan_loss(model: &dyn DenoisingModel, plan: &BatchPlan) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..plan.batch {
        let r = k * plan.len..(k + 1) * plan.len;
        let clean = &plan.clean[r.clone()];
        let noisy = &plan.noisy[r.clone()];
        // weights are constant within a block wherever they are nonzero
        let weights: Vec<f64> = (0..plan.num_blocks())
            .map(|b| {
                plan.weights[r.start + b * plan.block_size..r.start + (b + 1) * plan.block_size]
                    .iter()
                    .copied()
                    .fold(0.0, f64::max)
            })
            .collect();
        total += block_losses(model, clean, noisy, &weights, plan.block_size)?.iter().sum::<f64>();
    }
    Ok(total / (plan.batch * plan.len) as f64)
}

/// Mean and variance of the minibatch loss over the given base randomness.
pub fn loss_variance(
    model: &dyn DenoisingModel,
    batch: &[Vec<usize>],
    block_size: usize,
    schedule: &NoiseSchedule,
    bases: &[BaseNoise],
) -> Result<(f64, f64)> {
    let losses = bases
        .iter()
        .map(|base| {
            let plan = BatchPlan::from_base(batch, block_size, schedule, model.mask_id(), base)?;
            plan_loss(model, &plan)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, sd) = mean_sd(&losses);
    Ok((mean, sd * sd))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleScore {
    pub schedule: NoiseSchedule,
    pub loss_mean: f64,
    pub loss_variance: f64,
}

/// Scores every candidate on the same `draws` base corruptions and returns
/// the one with the least loss variance. Ties go to the wider mask-rate
/// range, then to the lower β.
pub fn select_schedule(
    model: &dyn DenoisingModel,
    batch: &[Vec<usize>],
    block_size: usize,
    grid: &[NoiseSchedule],
    draws: usize,
    seed: u64,
) -> Result<(NoiseSchedule, Vec<ScheduleScore>)> {
    if grid.is_empty() {
        return Err(Bd3Error::config("empty schedule grid"));
    }
    if draws < 2 {
        return Err(Bd3Error::Contract("variance needs at least two draws".into()));
    }
    let len = batch.first().map_or(0, Vec::len);
    crate::denoiser::check_block_size(len, block_size)?;
    let mut rng = SplitRng::new(seed);
    let bases: Vec<BaseNoise> = (0..draws)
        .map(|_| BaseNoise::draw(batch.len(), len / block_size, len, &mut rng))
        .collect();
    let scores = grid
        .iter()
        .map(|s| {
            let (loss_mean, loss_variance) = loss_variance(model, batch, block_size, s, &bases)?;
            Ok(ScheduleScore {
                schedule: *s,
                loss_mean,
                loss_variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = pick_best(&scores).expect("nonempty grid");
    Ok((best.schedule, scores))
}

/// Least variance; ties to the wider range, then the lower β.
pub(crate) fn pick_best(scores: &[ScheduleScore]) -> Option<&ScheduleScore> {
    scores.iter().min_by(|a, b| {
        let (ba, oa) = a.schedule.mask_range();
        let (bb, ob) = b.schedule.mask_range();
        let (wa, wb) = (oa - ba, ob - bb);
        let wider = if (wa - wb).abs() < 1e-12 {
            std::cmp::Ordering::Equal
        } else {
            wb.total_cmp(&wa)
        };
        a.loss_variance.total_cmp(&b.loss_variance).then(wider).then(ba.total_cmp(&bb))
    })
}
