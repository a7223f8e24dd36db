use serde::{Deserialize, Serialize};

use super::{sample_block_ancestral, sample_block_first_hitting, WithinBlock};
use crate::denoiser::BlockDenoiser;
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStop {
    /// Nats of mean predictive entropy.
    pub threshold: f64,
    /// Trailing tokens averaged.
    pub window: usize,
}

impl Default for EntropyStop {
    fn default() -> Self {
        Self {
            threshold: 4.0,
            window: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Stop when the next block would not fit the model context.
    Fixed,
    /// Past the context, condition on the most recent whole blocks only,
    /// re-positioned from 0.
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Extend the cache with each committed block.
    Incremental,
    /// Rebuild the conditioning state from scratch before every block.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub sampler: WithinBlock,
    /// Reverse-process schedule on the ancestral time grid.
    pub schedule: NoiseSchedule,
    pub nucleus: f64,
    pub max_blocks: usize,
    pub eos: Option<usize>,
    pub entropy_stop: Option<EntropyStop>,
    pub seed: u64,
    pub length_mode: LengthMode,
    pub cache_mode: CacheMode,
    pub record_trajectories: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampler: WithinBlock::FirstHitting,
            schedule: NoiseSchedule::Linear,
            nucleus: 1.0,
            max_blocks: 16,
            eos: None,
            entropy_stop: None,
            seed: 0,
            length_mode: LengthMode::Sliding,
            cache_mode: CacheMode::Incremental,
            record_trajectories: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nucleus > 0.0 && self.nucleus <= 1.0) {
            return Err(Bd3Error::config(format!("nucleus p = {} outside (0, 1]", self.nucleus)));
        }
        if let WithinBlock::Ancestral { steps: 0 } = self.sampler {
            return Err(Bd3Error::config("ancestral sampler needs T >= 1"));
        }
        if let Some(e) = self.entropy_stop {
            if e.window == 0 {
                return Err(Bd3Error::config("entropy window must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Entropy,
    MaxBlocks,
    ContextLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Generated tokens, excluding the prompt.
    pub length: usize,
    pub nfe: usize,
    pub blocks: usize,
    /// Mean predictive entropy of the trailing window after each block.
    pub entropy_trace: Vec<f64>,
    pub stop_reason: StopReason,
    /// Set on an entropy stop.
    pub degenerate: bool,
    /// Conditioning states rebuilt from scratch (sliding or recompute).
    pub state_rebuilds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Predictive entropy per generated token.
    pub entropies: Vec<f64>,
    /// Per block, the block contents after each revealing step (if recorded).
    pub trajectories: Vec<Vec<Vec<usize>>>,
    pub stats: GenerationStats,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// Samples blocks left to right after `prompt` until a stop rule fires.
pub fn generate<M: BlockDenoiser>(model: &M, prompt: &[usize], config: &SamplerConfig) -> Result<Generation> {
    config.validate()?;
    let bs = model.block_size();
    if !prompt.len().is_multiple_of(bs) {
        return Err(Bd3Error::config(format!(
            "prompt length {} is not a multiple of block size {bs}",
            prompt.len()
        )));
    }
    let ctx = model.max_context();
    if let Some(c) = ctx {
        if c < bs {
            return Err(Bd3Error::config(format!("model context {c} is shorter than one block")));
        }
    }
    let mut rng = SplitRng::new(config.seed);
    let mut tokens = prompt.to_vec();
    // committed tokens the state conditions on start here
    let mut start = match ctx {
        Some(c) if prompt.len() + bs > c && config.length_mode == LengthMode::Sliding => prompt.len() - (c - bs) / bs * bs,
        _ => 0,
    };
    let mut state = model.prefix_state(&tokens[start..])?;
    let mut out = Generation {
        tokens: Vec::new(),
        prompt_len: prompt.len(),
        entropies: Vec::new(),
        trajectories: Vec::new(),
        stats: GenerationStats {
            length: 0,
            nfe: 0,
            blocks: 0,
            entropy_trace: Vec::new(),
            stop_reason: StopReason::MaxBlocks,
            degenerate: false,
            state_rebuilds: 0,
        },
    };
    let mut stop = StopReason::MaxBlocks;
    for _ in 0..config.max_blocks {
        if let Some(c) = ctx {
            if model.state_len(&state) + bs > c {
                match config.length_mode {
                    LengthMode::Fixed => {
                        stop = StopReason::ContextLimit;
                        break;
                    }
                    LengthMode::Sliding => {
                        start = tokens.len() - (c - bs) / bs * bs;
                        state = model.prefix_state(&tokens[start..])?;
                        out.stats.state_rebuilds += 1;
                    }
                }
            }
        }
        let sample = match config.sampler {
            WithinBlock::Ancestral { steps } => sample_block_ancestral(
                model,
                &state,
                steps,
                &config.schedule,
                config.nucleus,
                &mut rng,
                config.record_trajectories,
            )?,
            WithinBlock::FirstHitting => sample_block_first_hitting(model, &state, config.nucleus, &mut rng, config.record_trajectories)?,
        };
        out.stats.nfe += sample.nfe;
        out.stats.blocks += 1;
        if config.record_trajectories {
            out.trajectories.push(sample.trajectory.clone());
        }
        let eos_at = config.eos.and_then(|e| sample.tokens.iter().position(|&t| t == e));
        let keep = eos_at.map_or(bs, |p| p + 1);
        tokens.extend_from_slice(&sample.tokens[..keep]);
        out.entropies.extend_from_slice(&sample.entropies[..keep]);
        if let Some(es) = config.entropy_stop {
            let w = es.window.min(out.entropies.len());
            let mean = out.entropies[out.entropies.len() - w..].iter().sum::<f64>() / w as f64;
            out.stats.entropy_trace.push(mean);
            if eos_at.is_none() && out.entropies.len() >= es.window && mean < es.threshold {
                stop = StopReason::Entropy;
                break;
            }
        }
        if eos_at.is_some() {
            stop = StopReason::Eos;
            break;
        }
        match config.cache_mode {
            CacheMode::Incremental => model.commit(&mut state, &sample.tokens)?,
            CacheMode::Recompute => {
                state = model.prefix_state(&tokens[start..])?;
                out.stats.state_rebuilds += 1;
            }
        }
    }
    out.stats.stop_reason = stop;
    out.stats.degenerate = stop == StopReason::Entropy;
    out.stats.length = tokens.len() - prompt.len();
    out.tokens = tokens;
    Ok(out)
}
