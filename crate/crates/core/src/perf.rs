//! Wall-clock measurements shared by the benchmark command and the
//! performance acceptance check.

use std::time::Instant;

use serde::Serialize;

use crate::denoiser::{Bd3Model, DenoiserConfig};
use crate::error::Result;
use crate::masks::{attention::attention_forward, default_tiles, dense_attention_reference, AttentionMaskSpec, AttnDims};
use crate::objectives::LossMode;
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamW, AdamWConfig};
use crate::training::train_step;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub label: String,
    pub seconds: Vec<f64>,
}

impl Timing {
    pub fn median(&self) -> f64 {
        let mut s = self.seconds.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    pub fn min(&self) -> f64 {
        self.seconds.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times timed.
pub fn time_it<F: FnMut() -> Result<()>>(label: impl Into<String>, warmup: usize, reps: usize, mut f: F) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut seconds = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    Ok(Timing {
        label: label.into(),
        seconds,
    })
}

/// Model used for step timings: 1 layer, 2 heads, width 32.
pub fn bench_model(len: usize, block_size: usize, seed: u64) -> Result<Bd3Model> {
    let config = DenoiserConfig {
        layers: 1,
        heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 8,
        max_len: len,
        block_size,
    };
    Bd3Model::new(config, &mut SplitRng::new(seed))
}

/// One full optimizer step (corruption, loss, backward, AdamW) in `mode`.
/// Each repetition starts from an untimed copy of `model` whose mask cache
/// is already warm.
pub fn time_train_step(model: &Bd3Model, mode: LossMode, batch: usize, reps: usize, seed: u64) -> Result<Timing> {
    let len = model.config.max_len;
    let bs = model.config.block_size;
    let mut rng = SplitRng::new(seed);
    let seqs: Vec<Vec<usize>> = (0..batch).map(|_| (0..len).map(|_| rng.below(model.mask_id())).collect()).collect();
    let optim = AdamWConfig {
        warmup_steps: 0,
        ..AdamWConfig::default()
    };
    let mut warm = model.clone();
    let mut opt = AdamW::new(optim, &warm.params);
    train_step(&mut warm, &mut opt, &seqs, &NoiseSchedule::Linear, bs, mode, &mut rng.split())?;
    let mut seconds = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut m = warm.clone();
        m.params = model.params.clone();
        let mut opt = AdamW::new(optim, &m.params);
        let mut r = rng.split();
        let t = Instant::now();
        train_step(&mut m, &mut opt, &seqs, &NoiseSchedule::Linear, bs, mode, &mut r)?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    Ok(Timing {
        label: format!("{mode:?} step L={len} L'={bs}"),
        seconds,
    })
}

/// Dense-reference and tile-sparse forward attention over the 2L×2L
/// training mask with random inputs.
pub fn time_attention(len: usize, block_size: usize, d: usize, heads: usize, reps: usize, seed: u64) -> Result<(Timing, Timing)> {
    let mask = AttentionMaskSpec::full(len, block_size)?;
    let tiles = default_tiles(&mask)?;
    let n = 2 * len;
    let mut rng = SplitRng::new(seed);
    let mut rand = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.normal()).collect() };
    let (q, k, v) = (rand(n * d), rand(n * d), rand(n * d));
    let dims = AttnDims {
        batch: 1,
        nq: n,
        nk: n,
        d,
        heads,
    };
    let dense = time_it(format!("dense attention L={len} L'={block_size}"), 1, reps, || {
        dense_attention_reference(&q, &k, &v, dims, &mask).map(|_| ())
    })?;
    let sparse = time_it(format!("sparse attention L={len} L'={block_size}"), 1, reps, || {
        attention_forward(&q, &k, &v, dims, &mask, &tiles).map(|_| ())
    })?;
    Ok((dense, sparse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_conventions() {
        let t = Timing {
            label: String::new(),
            seconds: vec![4.0, 10.0],
        };
        assert_eq!(t.median(), 7.0);
        let t = Timing {
            label: String::new(),
            seconds: vec![3.0, 1.0, 2.0],
        };
        assert_eq!(t.median(), 2.0);
        assert_eq!(t.min(), 1.0);
    }

    #[test]
    fn small_timings_run() {
        let model = bench_model(16, 4, 0).unwrap();
        for mode in [LossMode::TwoPass, LossMode::Vectorized] {
            let t = time_train_step(&model, mode, 2, 2, 1).unwrap();
            assert_eq!(t.seconds.len(), 2);
            assert!(t.median() > 0.0);
        }
        let (d, s) = time_attention(16, 4, 8, 2, 2, 2).unwrap();
        assert!(d.median() > 0.0 && s.median() > 0.0);
    }
}
