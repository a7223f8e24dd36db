//! Minibatch NELBO on the tape, in two-pass and vectorized form.

use serde::{Deserialize, Serialize};

use super::draw_in_stratum;
use crate::denoiser::{check_block_size, Bd3Model, PrefixRef};
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{kernels::logsumexp, Gradients, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Clean prefix pass, then one pass per noisy block.
    TwoPass,
    /// Single pass over `x_t ⊕ x` under the composite mask.
    Vectorized,
}

/// Schedule-free randomness for a batch: one time offset per (sequence,
/// block) stratum and one uniform per token. Reusing it across schedules
/// gives coupled corruptions.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNoise {
    pub batch: usize,
    pub blocks: usize,
    pub len: usize,
    pub time_u: Vec<f64>,
    pub token_u: Vec<f64>,
}

impl BaseNoise {
    pub fn draw(batch: usize, blocks: usize, len: usize, rng: &mut SplitRng) -> Self {
        let time_u = (0..batch * blocks).map(|_| rng.uniform_open()).collect();
        let token_u = (0..batch * len).map(|_| rng.uniform()).collect();
        Self {
            batch,
            blocks,
            len,
            time_u,
            token_u,
        }
    }
}

/// A corrupted minibatch: `batch` sequences of `len` tokens stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    /// Loss weight per position; zero where the token is visible.
    pub weights: Vec<f64>,
    pub times: Vec<Vec<f64>>,
    pub batch: usize,
    pub len: usize,
    pub block_size: usize,
}

impl BatchPlan {
    pub fn from_base(seqs: &[Vec<usize>], block_size: usize, schedule: &NoiseSchedule, mask_id: usize, base: &BaseNoise) -> Result<Self> {
        let batch = seqs.len();
        let len = seqs.first().map_or(0, Vec::len);
        if batch == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Bd3Error::dim("batch sequences must be nonempty and of equal length"));
        }
        check_block_size(len, block_size)?;
        let blocks = len / block_size;
        if (base.batch, base.blocks, base.len) != (batch, blocks, len) {
            return Err(Bd3Error::dim("base noise drawn for a different batch shape"));
        }
        let n = (batch * blocks) as f64;
        let mut plan = Self {
            clean: Vec::with_capacity(batch * len),
            noisy: Vec::with_capacity(batch * len),
            weights: Vec::with_capacity(batch * len),
            times: Vec::with_capacity(batch),
            batch,
            len,
            block_size,
        };
        for (k, seq) in seqs.iter().enumerate() {
            crate::data::check_clean(seq, mask_id + 1)?;
            let mut row = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let cell = k * blocks + b;
                let mut u = base.time_u[cell];
                let draw = draw_in_stratum(cell as f64, n, schedule, || {
                    let r = u;
                    u = 0.5 * (u + 1.0);
                    r
                })?;
                row.push(draw.t);
                for l in b * block_size..(b + 1) * block_size {
                    let masked = base.token_u[k * len + l] < draw.mask_prob;
                    plan.clean.push(seq[l]);
                    plan.noisy.push(if masked { mask_id } else { seq[l] });
                    plan.weights.push(if masked { draw.loss_weight() } else { 0.0 });
                }
            }
            plan.times.push(row);
        }
        Ok(plan)
    }

    pub fn sample(seqs: &[Vec<usize>], block_size: usize, schedule: &NoiseSchedule, mask_id: usize, rng: &mut SplitRng) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        check_block_size(len, block_size)?;
        let base = BaseNoise::draw(seqs.len(), len / block_size, len, rng);
        Self::from_base(seqs, block_size, schedule, mask_id, &base)
    }

    /// Every position masked with unit weight (the AR objective at L′ = 1).
    pub fn all_masked(seqs: &[Vec<usize>], block_size: usize, mask_id: usize) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        check_block_size(len, block_size)?;
        let base = BaseNoise {
            batch: seqs.len(),
            blocks: len / block_size,
            len,
            time_u: vec![0.5; seqs.len() * (len / block_size)],
            token_u: vec![0.0; seqs.len() * len],
        };
        Self::from_base(seqs, block_size, &NoiseSchedule::FullMask, mask_id, &base)
    }

    pub fn num_blocks(&self) -> usize {
        self.len / self.block_size
    }
}

/// Values of one minibatch loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Σ weight·CE / (batch · len), the training objective.
    pub loss: f64,
    /// Weighted CE per block, averaged over the batch.
    pub per_block: Vec<f64>,
    /// Weighted CE per position, `batch · len` entries.
    pub per_token: Vec<f64>,
    pub tokens: usize,
}

fn row_ce(logits: &[f64], target: usize) -> f64 {
    logsumexp(logits) - logits[target]
}

/// Builds the loss graph; returns the scalar loss and per-position CE values.
fn build<'p>(model: &Bd3Model, g: &mut Graph<'p>, plan: &BatchPlan, mode: LossMode) -> Result<(Var, Vec<f64>)> {
    let (k, len, bs) = (plan.batch, plan.len, plan.block_size);
    let v = model.config.vocab_size;
    let mut per_token = vec![0.0; k * len];
    let norm = 1.0 / (k * len) as f64;
    match mode {
        LossMode::Vectorized => {
            let logits = model.graph_vectorized(g, &plan.clean, &plan.noisy, k, bs)?;
            let ce = g.masked_cross_entropy(logits, &plan.clean, &plan.weights)?;
            let vals = g.value(logits);
            for (r, w) in plan.weights.iter().enumerate() {
                if *w != 0.0 {
                    per_token[r] = w * row_ce(&vals[r * v..(r + 1) * v], plan.clean[r]);
                }
            }
            Ok((g.scale(ce, norm), per_token))
        }
        LossMode::TwoPass => {
            let pre_len = len - bs;
            let prefix = if pre_len > 0 {
                let clean_prefix: Vec<usize> = (0..k)
                    .flat_map(|s| plan.clean[s * len..s * len + pre_len].iter().copied())
                    .collect();
                model.graph_prefix(g, &clean_prefix, k, bs)?
            } else {
                Vec::new()
            };
            let mut total: Option<Var> = None;
            for b in 0..plan.num_blocks() {
                let rows: Vec<usize> = (0..k).flat_map(|s| (s * len + b * bs)..(s * len + (b + 1) * bs)).collect();
                let weights: Vec<f64> = rows.iter().map(|&r| plan.weights[r]).collect();
                if weights.iter().all(|&w| w == 0.0) {
                    continue;
                }
                let ids: Vec<usize> = rows.iter().map(|&r| plan.noisy[r]).collect();
                let targets: Vec<usize> = rows.iter().map(|&r| plan.clean[r]).collect();
                let pref = PrefixRef {
                    kv: &prefix,
                    stride: pre_len,
                    rows: b * bs,
                };
                let (hidden, _) = model.graph_block(g, &ids, b * bs, (b > 0).then_some(pref), k, true, true)?;
                let logits = model.graph_logits(g, hidden.expect("hidden requested"))?;
                let ce = g.masked_cross_entropy(logits, &targets, &weights)?;
                let vals = g.value(logits);
                for (i, &r) in rows.iter().enumerate() {
                    if weights[i] != 0.0 {
                        per_token[r] = weights[i] * row_ce(&vals[i * v..(i + 1) * v], targets[i]);
                    }
                }
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
            }
            let total = match total {
                Some(t) => t,
                None => g.leaf(crate::tensor::Tensor::scalar(0.0)),
            };
            Ok((g.scale(total, norm), per_token))
        }
    }
}

/// Minibatch loss and, optionally, its parameter gradient.
pub fn batch_loss(model: &Bd3Model, plan: &BatchPlan, mode: LossMode, want_grad: bool) -> Result<(BatchLoss, Option<Gradients>)> {
    if plan.clean.len() != plan.batch * plan.len || plan.len > model.config.max_len {
        return Err(Bd3Error::dim("batch plan does not fit the model"));
    }
    let mut g = Graph::with_params(&model.params);
    let (loss, per_token) = build(model, &mut g, plan, mode)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(Bd3Error::NotANumber("batch loss"));
    }
    let grads = if want_grad { Some(g.backward(loss)?.params) } else { None };
    let mut per_block = vec![0.0; plan.num_blocks()];
    for (r, c) in per_token.iter().enumerate() {
        per_block[(r % plan.len) / plan.block_size] += c / plan.batch as f64;
    }
    Ok((
        BatchLoss {
            loss: value,
            per_block,
            per_token,
            tokens: plan.batch * plan.len,
        },
        grads,
    ))
}

/// Autoregressive NLL of `x` on the tape: each token predicted from a single
/// mask query over the causal clean prefix. Returns per-token NLL.
pub fn ar_loss(model: &Bd3Model, x: &[usize], want_grad: bool) -> Result<(Vec<f64>, Option<Gradients>)> {
    let plan = BatchPlan::all_masked(&[x.to_vec()], 1, model.mask_id())?;
    let (loss, grads) = batch_loss(model, &plan, LossMode::TwoPass, want_grad)?;
    Ok((loss.per_token, grads))
}
