//! Block-by-block generation: within-block samplers, nucleus filtering and
//! Gumbel-max draws.

mod generate;

pub use generate::{generate, CacheMode, EntropyStop, Generation, GenerationStats, LengthMode, SamplerConfig, StopReason};

use serde::{Deserialize, Serialize};

use crate::data::markov::entropy;
use crate::denoiser::BlockDenoiser;
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;

/// Tolerance on probability mass for the nucleus cut and normalization checks.
pub const MASS_TOL: f64 = 1e-12;

/// argmax(log p + G) with G standard Gumbel from 64-bit uniforms.
pub fn gumbel_categorical(log_probs: &[f64], rng: &mut SplitRng) -> Result<usize> {
    let mut best = None;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lp.is_nan() {
            return Err(Bd3Error::NotANumber("log-probabilities"));
        }
        let g = -(-rng.uniform_open().ln()).ln();
        if lp + g > best_val {
            best_val = lp + g;
            best = Some(i);
        }
    }
    best.ok_or_else(|| Bd3Error::Domain("distribution has no support".into()))
}

/// The same draw with 32-bit uniforms and arithmetic, whose Gumbel tail is
/// truncated near 16.6.
pub fn gumbel_categorical_f32(log_probs: &[f64], rng: &mut SplitRng) -> Result<usize> {
    let mut best = None;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let u = rng.uniform_f32().max(f32::MIN_POSITIVE);
        let g = -(-u.ln()).ln();
        let v = lp as f32 + g;
        if v > best_val {
            best_val = v;
            best = Some(i);
        }
    }
    best.ok_or_else(|| Bd3Error::Domain("distribution has no support".into()))
}

/// Keeps the smallest set of most probable tokens holding mass ≥ p (ties
/// broken toward lower ids) and renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Bd3Error::Domain(format!("nucleus p = {p} outside (0, 1]")));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&x| x < 0.0 || x.is_nan()) || total <= 0.0 {
        return Err(Bd3Error::Domain("nucleus filter needs a nonnegative distribution".into()));
    }
    if p == 1.0 {
        return Ok(probs.iter().map(|x| x / total).collect());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        if probs[i] == 0.0 {
            break;
        }
        out[i] = probs[i];
        cum += probs[i] / total;
        if cum >= p - MASS_TOL {
            break;
        }
    }
    let kept: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= kept);
    Ok(out)
}

/// Draws a token from `probs` after nucleus filtering.
pub fn sample_token(probs: &[f64], nucleus: f64, rng: &mut SplitRng) -> Result<usize> {
    let filtered = nucleus_filter(probs, nucleus)?;
    let logs: Vec<f64> = filtered.iter().map(|x| x.ln()).collect();
    gumbel_categorical(&logs, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WithinBlock {
    /// T reverse steps on the grid t = j/T under the given schedule.
    Ancestral { steps: usize },
    /// One token per call at the exact next unmasking time.
    FirstHitting,
}

impl WithinBlock {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first-hitting" | "first_hitting" => Ok(Self::FirstHitting),
            _ => match s.strip_prefix("ancestral:").map(str::parse::<usize>) {
                Some(Ok(steps)) if steps >= 1 => Ok(Self::Ancestral { steps }),
                _ => Err(Bd3Error::config(format!("unknown sampler {s:?}; use ancestral:T or first-hitting"))),
            },
        }
    }
}

/// One denoised block and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSample {
    pub tokens: Vec<usize>,
    pub nfe: usize,
    /// Step at which each position was revealed: j for ancestral (t = j/T),
    /// the call index for first-hitting.
    pub reveal_step: Vec<usize>,
    pub reveal_time: Vec<f64>,
    /// Predictive entropy (nats) of the distribution each token was drawn from.
    pub entropies: Vec<f64>,
    /// Block contents after every step that changed it, when recorded.
    pub trajectory: Vec<Vec<usize>>,
}

fn check_row(row: &[f64]) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Bd3Error::Domain(format!("denoiser row sums to {s}")));
    }
    Ok(())
}

/// Ancestral sampling of one block from all-mask. Unmasking decisions are
/// drawn before the denoiser call, and steps that reveal nothing skip it, so
/// NFE never exceeds the block size.
pub fn sample_block_ancestral<M: BlockDenoiser>(
    model: &M,
    state: &M::State,
    steps: usize,
    schedule: &NoiseSchedule,
    nucleus: f64,
    rng: &mut SplitRng,
    record: bool,
) -> Result<BlockSample> {
    if steps == 0 {
        return Err(Bd3Error::config("ancestral sampler needs T >= 1"));
    }
    let n = model.block_size();
    let mask = model.vocab_size() - 1;
    let mut block = vec![mask; n];
    let mut out = BlockSample {
        tokens: Vec::new(),
        nfe: 0,
        reveal_step: vec![0; n],
        reveal_time: vec![0.0; n],
        entropies: vec![0.0; n],
        trajectory: Vec::new(),
    };
    let mut chosen = Vec::with_capacity(n);
    let mut a_t = schedule.alpha(1.0)?;
    for j in (1..=steps).rev() {
        let t = j as f64 / steps as f64;
        let a_s = schedule.alpha((j - 1) as f64 / steps as f64)?;
        let reveal = if j == 1 || a_t >= 1.0 {
            1.0
        } else {
            ((a_s - a_t) / (1.0 - a_t)).clamp(0.0, 1.0)
        };
        a_t = a_s;
        chosen.clear();
        chosen.extend((0..n).filter(|&i| block[i] == mask).filter(|_| rng.uniform() < reveal));
        if chosen.is_empty() {
            continue;
        }
        // steps that reveal nothing reuse the previous output implicitly
        let probs = model.denoise(state, &block)?;
        out.nfe += 1;
        for &i in &chosen {
            check_row(&probs[i])?;
            block[i] = sample_token(&probs[i], nucleus, rng)?;
            out.reveal_step[i] = j;
            out.reveal_time[i] = t;
            out.entropies[i] = entropy(&probs[i]);
        }
        if record {
            out.trajectory.push(block.clone());
        }
        if block.iter().all(|&x| x != mask) {
            break;
        }
    }
    out.tokens = block;
    Ok(out)
}

/// First-hitting sampling: with n masked tokens the next reveal time is
/// t·u^{1/n}; one uniformly chosen masked position is revealed per call.
pub fn sample_block_first_hitting<M: BlockDenoiser>(
    model: &M,
    state: &M::State,
    nucleus: f64,
    rng: &mut SplitRng,
    record: bool,
) -> Result<BlockSample> {
    let n = model.block_size();
    let mask = model.vocab_size() - 1;
    let mut block = vec![mask; n];
    let mut out = BlockSample {
        tokens: Vec::new(),
        nfe: 0,
        reveal_step: vec![0; n],
        reveal_time: vec![0.0; n],
        entropies: vec![0.0; n],
        trajectory: Vec::new(),
    };
    let mut t = 1.0f64;
    for k in 0..n {
        let remaining = n - k;
        t *= rng.uniform_open().powf(1.0 / remaining as f64);
        let masked: Vec<usize> = (0..n).filter(|&i| block[i] == mask).collect();
        let i = masked[rng.below(remaining)];
        let probs = model.denoise(state, &block)?;
        check_row(&probs[i])?;
        out.nfe += 1;
        block[i] = sample_token(&probs[i], nucleus, rng)?;
        out.reveal_step[i] = k + 1;
        out.reveal_time[i] = t;
        out.entropies[i] = entropy(&probs[i]);
        if record {
            out.trajectory.push(block.clone());
        }
    }
    out.tokens = block;
    Ok(out)
}

/// A denoiser whose per-position distributions ignore all context.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductDenoiser {
    /// One row of `V` probabilities per block position; the last entry (mask) is 0.
    pub probs: Vec<Vec<f64>>,
    pub max_context: Option<usize>,
}

impl ProductDenoiser {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let v = probs.first().map_or(0, Vec::len);
        if v < 2 || probs.iter().any(|r| r.len() != v || r[v - 1] != 0.0) {
            return Err(Bd3Error::config("product denoiser rows need equal length and zero mask mass"));
        }
        probs.iter().try_for_each(|r| check_row(r))?;
        Ok(Self { probs, max_context: None })
    }
}

impl BlockDenoiser for ProductDenoiser {
    type State = usize;

    fn vocab_size(&self) -> usize {
        self.probs[0].len()
    }

    fn block_size(&self) -> usize {
        self.probs.len()
    }

    fn max_context(&self) -> Option<usize> {
        self.max_context
    }

    fn prefix_state(&self, committed: &[usize]) -> Result<usize> {
        Ok(committed.len())
    }

    fn state_len(&self, state: &usize) -> usize {
        *state
    }

    fn denoise(&self, _state: &usize, noisy: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mask = self.vocab_size() - 1;
        Ok(noisy
            .iter()
            .zip(&self.probs)
            .map(|(&tok, row)| {
                if tok == mask {
                    row.clone()
                } else {
                    let mut p = vec![0.0; row.len()];
                    p[tok] = 1.0;
                    p
                }
            })
            .collect())
    }

    fn commit(&self, state: &mut usize, block: &[usize]) -> Result<()> {
        *state += block.len();
        Ok(())
    }
}

/// Pearson goodness-of-fit p-value of `counts` against `probs`. Cells with
/// expected count below 5 are pooled.
pub fn chi_square_goodness(counts: &[u64], probs: &[f64]) -> Result<f64> {
    if counts.len() != probs.len() {
        return Err(Bd3Error::dim("counts and probabilities differ in length"));
    }
    let n: u64 = counts.iter().sum();
    let (mut obs, mut exp) = (Vec::new(), Vec::new());
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * n as f64;
        if e < 5.0 {
            pool_o += c as f64;
            pool_e += e;
        } else {
            obs.push(c as f64);
            exp.push(e);
        }
    }
    if pool_e > 0.0 {
        obs.push(pool_o);
        exp.push(pool_e);
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    chi_square_sf(stat, obs.len().saturating_sub(1))
}

/// Pearson homogeneity p-value for two count vectors over the same cells.
/// Cells whose pooled expectation is below 5 in either sample are merged.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Bd3Error::dim("count vectors differ in length"));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    let mut cells = Vec::new();
    let mut pool = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let tot = (x + y) as f64;
        if tot * na.min(nb) / n < 5.0 {
            pool.0 += x as f64;
            pool.1 += y as f64;
        } else {
            cells.push((x as f64, y as f64));
        }
    }
    if pool.0 + pool.1 > 0.0 {
        cells.push(pool);
    }
    let stat: f64 = cells
        .iter()
        .map(|&(x, y)| {
            let (ea, eb) = ((x + y) * na / n, (x + y) * nb / n);
            (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
        })
        .sum();
    chi_square_sf(stat, cells.len().saturating_sub(1))
}

fn chi_square_sf(stat: f64, dof: usize) -> Result<f64> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if dof == 0 {
        return Ok(1.0);
    }
    let d = ChiSquared::new(dof as f64).map_err(|e| Bd3Error::Domain(e.to_string()))?;
    Ok(d.sf(stat))
}

#[cfg(test)]
mod tests;
