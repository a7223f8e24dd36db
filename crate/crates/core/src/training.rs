//! Training loop: per-step updates, pre-training at L′ = L, fine-tuning with
//! periodic schedule search, evaluation and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::Bd3Model;
use crate::error::{Bd3Error, Result};
use crate::objectives::{batch_loss, eval_nelbo_linear, grad_variance, select_schedule, BatchLoss, BatchPlan, LossMode, ModelObjective};
use crate::rng::SplitRng;
use crate::schedule::{clipped_grid, NoiseSchedule, DEFAULT_GRID_BETAS, DEFAULT_GRID_OMEGAS};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, StepInfo, Tensor};

const STREAM_DATA: u64 = 1 << 48;
const STREAM_NOISE: u64 = 2 << 48;
const STREAM_EVAL: u64 = 3 << 48;
const STREAM_GRID: u64 = 4 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub betas: Vec<f64>,
    pub omegas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            betas: DEFAULT_GRID_BETAS.to_vec(),
            omegas: DEFAULT_GRID_OMEGAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps at the target block size.
    pub steps: usize,
    /// Steps at L′ = L before fine-tuning; 0 skips this phase.
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub schedule: NoiseSchedule,
    pub grid: GridConfig,
    /// Steps between schedule searches; 0 disables the search.
    pub grid_interval: usize,
    /// Shared base corruptions per candidate in the search.
    pub grid_draws: usize,
    pub optim: AdamWConfig,
    pub eval_interval: usize,
    pub eval_draws: usize,
    /// Gradient-variance batches measured at each evaluation; 0 skips it.
    pub variance_batches: usize,
    pub log_interval: usize,
    pub seed: u64,
    pub mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            pretrain_steps: 0,
            batch_size: 16,
            block_size: 4,
            schedule: NoiseSchedule::Linear,
            grid: GridConfig::default(),
            grid_interval: 0,
            grid_draws: 16,
            optim: AdamWConfig::default(),
            eval_interval: 250,
            eval_draws: 4,
            variance_batches: 0,
            log_interval: 10,
            seed: 0,
            mode: LossMode::Vectorized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.block_size == 0 || self.eval_draws == 0 {
            return Err(Bd3Error::config("batch_size, block_size and eval_draws must be positive"));
        }
        if self.eval_interval == 0 || self.log_interval == 0 {
            return Err(Bd3Error::config("eval_interval and log_interval must be positive"));
        }
        if self.grid_interval != 0 && self.grid_interval < self.eval_interval {
            return Err(Bd3Error::config(format!(
                "grid_interval {} must be at least eval_interval {} (or 0)",
                self.grid_interval, self.eval_interval
            )));
        }
        if self.grid_interval != 0 && self.grid_draws < 2 {
            return Err(Bd3Error::config("grid_draws must be at least 2"));
        }
        if self.variance_batches == 1 {
            return Err(Bd3Error::config("variance_batches must be 0 or at least 2"));
        }
        if let NoiseSchedule::Clipped { beta, omega } = self.schedule {
            NoiseSchedule::clipped(beta, omega)?;
        }
        clipped_grid(&self.grid.betas, &self.grid.omegas)?;
        Ok(())
    }
}

/// Result of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: BatchLoss,
    pub times: Vec<Vec<f64>>,
    pub info: StepInfo,
}

/// One update on `batch`: corrupt, evaluate the block NELBO, backpropagate
/// and apply AdamW.
pub fn train_step(
    model: &mut Bd3Model,
    opt: &mut AdamW,
    batch: &[Vec<usize>],
    schedule: &NoiseSchedule,
    block_size: usize,
    mode: LossMode,
    rng: &mut SplitRng,
) -> Result<StepReport> {
    let plan = BatchPlan::sample(batch, block_size, schedule, model.mask_id(), rng)?;
    let (loss, grads) = batch_loss(model, &plan, mode, true)?;
    model.params.zero_grad();
    model.params.accumulate(&grads.expect("requested"));
    let info = opt.step(&mut model.params);
    if model.params.iter().any(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(Bd3Error::NotANumber("parameters after update"));
    }
    Ok(StepReport {
        loss,
        times: plan.times,
        info,
    })
}

pub fn train_step_two_pass(
    model: &mut Bd3Model,
    opt: &mut AdamW,
    batch: &[Vec<usize>],
    schedule: &NoiseSchedule,
    block_size: usize,
    rng: &mut SplitRng,
) -> Result<StepReport> {
    train_step(model, opt, batch, schedule, block_size, LossMode::TwoPass, rng)
}

pub fn train_step_vectorized(
    model: &mut Bd3Model,
    opt: &mut AdamW,
    batch: &[Vec<usize>],
    schedule: &NoiseSchedule,
    block_size: usize,
    rng: &mut SplitRng,
) -> Result<StepReport> {
    train_step(model, opt, batch, schedule, block_size, LossMode::Vectorized, rng)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: u8,
    pub block_size: usize,
    pub loss: f64,
    pub ppl: f64,
    pub schedule: String,
    pub beta: f64,
    pub omega: f64,
    pub loss_var: Option<f64>,
    pub grad_var: Option<f64>,
    pub tokens_seen: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub eval_nelbo: Option<f64>,
    pub eval_ppl: Option<f64>,
}

/// Progress that a checkpoint must carry to resume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub tokens_seen: usize,
    pub schedule: NoiseSchedule,
    pub best_eval: Option<f64>,
}

fn schedule_meta(s: &NoiseSchedule) -> [f64; 3] {
    let code = match s {
        NoiseSchedule::Linear => 0.0,
        NoiseSchedule::Clipped { .. } => 1.0,
        NoiseSchedule::Logarithmic => 2.0,
        NoiseSchedule::SquareRoot => 3.0,
        NoiseSchedule::Square => 4.0,
        NoiseSchedule::Cosine => 5.0,
        NoiseSchedule::FullMask => 6.0,
    };
    let (b, o) = s.mask_range();
    [code, b, o]
}

fn schedule_from_meta(code: f64, beta: f64, omega: f64) -> Result<NoiseSchedule> {
    Ok(match code as u8 {
        0 => NoiseSchedule::Linear,
        1 => NoiseSchedule::clipped(beta, omega)?,
        2 => NoiseSchedule::Logarithmic,
        3 => NoiseSchedule::SquareRoot,
        4 => NoiseSchedule::Square,
        5 => NoiseSchedule::Cosine,
        6 => NoiseSchedule::FullMask,
        other => return Err(Bd3Error::Checkpoint(format!("unknown schedule code {other}"))),
    })
}

pub fn save_training_checkpoint(path: &Path, model: &Bd3Model, opt: &AdamW, state: &TrainState) -> Result<()> {
    let mut tensors = model.checkpoint_tensors();
    let [code, beta, omega] = schedule_meta(&state.schedule);
    for (k, v) in [
        ("step", state.step as f64),
        ("tokens_seen", state.tokens_seen as f64),
        ("schedule_code", code),
        ("schedule_beta", beta),
        ("schedule_omega", omega),
        ("best_eval", state.best_eval.unwrap_or(f64::NAN)),
    ] {
        tensors.push((format!("meta.{k}"), Tensor::scalar(v)));
    }
    tensors.extend(opt.state_tensors());
    write_checkpoint(path, &tensors)
}

/// Model, optimizer moments and progress from a training checkpoint. The
/// optimizer takes its hyperparameters from `optim`.
pub fn load_training_checkpoint(path: &Path, optim: AdamWConfig) -> Result<(Bd3Model, AdamW, TrainState)> {
    let tensors = read_checkpoint(path)?;
    let (model, meta) = Bd3Model::from_tensors(tensors.clone())?;
    let mut opt = AdamW::new(optim, &model.params);
    opt.load_state(&tensors)?;
    let get = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| Bd3Error::Checkpoint(format!("missing meta.{k}")))
    };
    let best = get("best_eval")?;
    let state = TrainState {
        step: get("step")? as usize,
        tokens_seen: get("tokens_seen")? as usize,
        schedule: schedule_from_meta(get("schedule_code")?, get("schedule_beta")?, get("schedule_omega")?)?,
        best_eval: (!best.is_nan()).then_some(best),
    };
    Ok((model, opt, state))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Bd3Model,
    pub metrics: Vec<MetricRecord>,
    pub state: TrainState,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Everything `train_run` needs besides data.
pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a [Vec<usize>],
    pub val: &'a [Vec<usize>],
    /// Directory for `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<&'a Path>,
}

/// Batches of epoch `epoch`: a seeded permutation cut into full batches.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = SplitRng::stream(seed, STREAM_DATA | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn check_corpus(name: &str, seqs: &[Vec<usize>], min: usize, max_len: usize) -> Result<usize> {
    if seqs.len() < min {
        return Err(Bd3Error::Data(format!(
            "{name} set has {} sequences, needs at least {min}",
            seqs.len()
        )));
    }
    let len = seqs[0].len();
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(Bd3Error::Data(format!("{name} sequences must share one nonzero length")));
    }
    if len > max_len {
        return Err(Bd3Error::Data(format!(
            "{name} sequences of length {len} exceed the model context {max_len}"
        )));
    }
    Ok(len)
}

/// Runs (or resumes) training. With `resume`, the model, optimizer and step
/// counter come from a checkpoint written by an earlier run of the same
/// config, and the continuation replays the original run exactly.
pub fn train_run(run: &TrainRun<'_>, model: Bd3Model, resume: Option<(AdamW, TrainState)>) -> Result<TrainOutcome> {
    let cfg = run.config;
    cfg.validate()?;
    let len = check_corpus("training", run.train, cfg.batch_size, model.config.max_len)?;
    check_corpus("validation", run.val, 1, model.config.max_len)?;
    crate::denoiser::check_block_size(len, cfg.block_size)?;
    for seq in run.train.iter().chain(run.val) {
        crate::data::check_clean(seq, model.config.vocab_size)?;
    }
    let mut model = model;
    let (mut opt, mut state) = match resume {
        Some(r) => r,
        None => (
            AdamW::new(cfg.optim, &model.params),
            TrainState {
                step: 0,
                tokens_seen: 0,
                schedule: cfg.schedule,
                best_eval: None,
            },
        ),
    };
    let mut writer = match run.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let file = fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(dir.join("metrics.jsonl"))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let last_path = run.out_dir.map(|d| d.join("last.ckpt"));
    let best_path = run.out_dir.map(|d| d.join("best.ckpt"));
    let grid = clipped_grid(&cfg.grid.betas, &cfg.grid.omegas)?;
    let per_epoch = run.train.len() / cfg.batch_size;
    let total = cfg.pretrain_steps + cfg.steps;
    let mut metrics = Vec::new();
    let mut last_loss_var = None;
    let mut wrote_best = false;

    while state.step < total {
        let step = state.step;
        let phase = if step < cfg.pretrain_steps { 1 } else { 2 };
        let block_size = if phase == 1 { len } else { cfg.block_size };
        let batch_idx = &epoch_batches(run.train.len(), cfg.batch_size, cfg.seed, step / per_epoch)[step % per_epoch];
        let batch: Vec<Vec<usize>> = batch_idx.iter().map(|&i| run.train[i].clone()).collect();
        let schedule = if phase == 1 { cfg.schedule } else { state.schedule };
        let mut rng = SplitRng::stream(cfg.seed, STREAM_NOISE | step as u64);
        let report = train_step(&mut model, &mut opt, &batch, &schedule, block_size, cfg.mode, &mut rng)?;
        state.step += 1;
        state.tokens_seen += batch.len() * len;
        let done = state.step;

        let grid_due = phase == 2 && cfg.grid_interval > 0 && (done - cfg.pretrain_steps).is_multiple_of(cfg.grid_interval);
        if grid_due {
            let val_batch: Vec<Vec<usize>> = run.val.iter().take(cfg.batch_size).cloned().collect();
            let mut candidates = grid.clone();
            if !candidates.contains(&state.schedule) {
                candidates.push(state.schedule);
            }
            let grid_seed = SplitRng::stream(cfg.seed, STREAM_GRID | done as u64).next_seed();
            let (best, scores) = select_schedule(&model, &val_batch, block_size, &candidates, cfg.grid_draws, grid_seed)?;
            let score_of = |s: &NoiseSchedule| scores.iter().find(|c| c.schedule == *s).map(|c| c.loss_variance);
            let (chosen, incumbent) = (score_of(&best), score_of(&state.schedule));
            if let (Some(c), Some(i)) = (chosen, incumbent) {
                if c > i {
                    return Err(Bd3Error::Contract("schedule search chose a higher-variance schedule".into()));
                }
            }
            state.schedule = best;
            last_loss_var = chosen;
        }

        let eval_due = done % cfg.eval_interval == 0 || done == total;
        let mut record_grad_var = None;
        let mut eval = None;
        if eval_due {
            let mut erng = SplitRng::stream(cfg.seed, STREAM_EVAL | done as u64);
            let r = eval_nelbo_linear(&model, run.val, block_size, cfg.eval_draws, &mut erng)?;
            eval = Some(r);
            if cfg.variance_batches >= 2 {
                let batches: Vec<Vec<Vec<usize>>> = (0..cfg.variance_batches)
                    .map(|m| {
                        let idx = &epoch_batches(run.train.len(), cfg.batch_size, cfg.seed ^ 0x5eed, m / per_epoch)[m % per_epoch];
                        idx.iter().map(|&i| run.train[i].clone()).collect()
                    })
                    .collect();
                let mut obj = ModelObjective {
                    model: &model,
                    batches: &batches,
                    schedule: state.schedule,
                    block_size,
                    seed: erng.next_seed(),
                    mode: cfg.mode,
                };
                record_grad_var = Some(grad_variance(&mut obj, cfg.variance_batches)?.grad_variance);
            }
            let improved = state.best_eval.is_none_or(|b| r.nats_per_token < b);
            if improved {
                state.best_eval = Some(r.nats_per_token);
            }
            if let Some(p) = &last_path {
                save_training_checkpoint(p, &model, &opt, &state)?;
            }
            if let (true, Some(p)) = (improved, &best_path) {
                save_training_checkpoint(p, &model, &opt, &state)?;
                wrote_best = true;
            }
        }

        if done % cfg.log_interval == 0 || eval_due || grid_due {
            let (beta, omega) = schedule.mask_range();
            let rec = MetricRecord {
                step: done,
                phase,
                block_size,
                loss: report.loss.loss,
                ppl: report.loss.loss.exp(),
                schedule: schedule.to_string(),
                beta,
                omega,
                loss_var: last_loss_var,
                grad_var: record_grad_var,
                tokens_seen: state.tokens_seen,
                lr: report.info.lr,
                grad_norm: report.info.grad_norm,
                clipped: report.info.clipped,
                eval_nelbo: eval.map(|e| e.nats_per_token),
                eval_ppl: eval.map(|e| e.perplexity),
            };
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            metrics.push(rec);
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let best_checkpoint = best_path.filter(|p| wrote_best || p.exists());
    Ok(TrainOutcome {
        model,
        metrics,
        state,
        last_checkpoint: last_path,
        best_checkpoint,
    })
}

/// Reads a `metrics.jsonl` stream.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Bd3Error::from))
        .collect()
}

/// Writes sequences as one whitespace-separated id list per line.
pub fn write_sequences(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in seqs {
        let line: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_sequences`]; blank lines are skipped.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Bd3Error::Data(format!("{}:{}: bad token id {t:?}", path.display(), n + 1)))
                })
                .collect()
        })
        .collect()
}
