//! The absorbing (masking) forward process and its reverse posterior.

use crate::data::TokenSequence;
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSequence {
    pub ids: Vec<usize>,
    pub times: Vec<f64>,
    pub mask_flags: Vec<bool>,
}

impl NoisedSequence {
    pub fn num_masked(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Masks `x[ℓ]` wherever `uniforms[ℓ] < mask_prob`. Sharing the uniforms across
/// schedules gives coupled corruptions.
pub fn mask_with_uniforms(x: &[usize], mask_prob: f64, uniforms: &[f64], mask_id: usize) -> (Vec<usize>, Vec<bool>) {
    let flags: Vec<bool> = uniforms.iter().map(|&u| u < mask_prob).collect();
    let ids = x.iter().zip(&flags).map(|(&tok, &m)| if m { mask_id } else { tok }).collect();
    (ids, flags)
}

fn ensure_clean(x: &[usize], mask_id: usize) -> Result<()> {
    match x.iter().position(|&v| v == mask_id) {
        Some(p) => Err(Bd3Error::Data(format!("clean input holds the mask id at {p}"))),
        None => Ok(()),
    }
}

pub fn noise_block(x_b: &[usize], t: f64, schedule: &NoiseSchedule, mask_id: usize, rng: &mut SplitRng) -> Result<(Vec<usize>, Vec<bool>)> {
    ensure_clean(x_b, mask_id)?;
    let p = schedule.mask_prob(t)?;
    let uniforms: Vec<f64> = (0..x_b.len()).map(|_| rng.uniform()).collect();
    Ok(mask_with_uniforms(x_b, p, &uniforms, mask_id))
}

pub fn noise_sequence(
    x: &TokenSequence,
    times: &[f64],
    schedule: &NoiseSchedule,
    mask_id: usize,
    rng: &mut SplitRng,
) -> Result<NoisedSequence> {
    if times.len() != x.num_blocks() {
        return Err(Bd3Error::dim(format!("{} times for {} blocks", times.len(), x.num_blocks())));
    }
    let mut ids = Vec::with_capacity(x.len());
    let mut mask_flags = Vec::with_capacity(x.len());
    for (b, &t) in times.iter().enumerate() {
        let (noisy, flags) = noise_block(x.block(b), t, schedule, mask_id, rng)?;
        ids.extend(noisy);
        mask_flags.extend(flags);
    }
    Ok(NoisedSequence {
        ids,
        times: times.to_vec(),
        mask_flags,
    })
}

/// q(x_s | x_t, x) over a vocabulary of `vocab_size` ids (mask id last).
pub fn reverse_posterior(x_t: usize, x: usize, s: f64, t: f64, schedule: &NoiseSchedule, vocab_size: usize) -> Result<Vec<f64>> {
    let mask_id = vocab_size - 1;
    if s >= t {
        return Err(Bd3Error::Domain(format!("posterior needs s < t, got s={s}, t={t}")));
    }
    if x == mask_id || (x_t != x && x_t != mask_id) {
        return Err(Bd3Error::Domain(format!("x_t={x_t} is unreachable from x={x}")));
    }
    let mut p = vec![0.0; vocab_size];
    if x_t != mask_id {
        p[x_t] = 1.0;
        return Ok(p);
    }
    let (a_s, a_t) = (schedule.alpha(s)?, schedule.alpha(t)?);
    if a_t >= 1.0 {
        return Err(Bd3Error::DegenerateTime(t));
    }
    p[mask_id] = (1.0 - a_s) / (1.0 - a_t);
    p[x] = 1.0 - p[mask_id];
    Ok(p)
}
