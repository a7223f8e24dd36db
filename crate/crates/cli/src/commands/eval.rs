use std::path::{Path, PathBuf};

use anyhow::Result;
use bd3lm::acceptance::exact_eval;
use bd3lm::config::ExperimentConfig;
use bd3lm::denoiser::{check_block_size, Bd3Model, DenoisingModel};
use bd3lm::objectives::{ar_nll, eval_nelbo_linear, mean_sd, MarkovOracle};
use bd3lm::training::read_sequences;
use bd3lm::{Bd3Error, SplitRng};
use clap::{Args, ValueEnum};
use serde::Serialize;

use super::{check_output, find_config, parent_dir};
use crate::report::Report;
use crate::rundir::record_output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Monte-Carlo NELBO under the linear schedule.
    Nelbo,
    /// Exact linear-schedule NELBO by enumerating mask patterns (L′ ≤ 16).
    Exact,
    /// Left-to-right likelihood; needs L′ = 1.
    Ar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Evaluate the exact Markov source of the config instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Defaults to the `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequences as whitespace-separated token ids, one per line.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Must agree with the checkpoint.
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long, value_enum, default_value = "nelbo")]
    pub mode: EvalMode,
    /// Monte-Carlo draws per sequence.
    #[arg(long, default_value_t = 16)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file; defaults to `eval.tsv` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub nats_per_token: f64,
    pub perplexity: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sequences: usize,
    pub tokens: usize,
    pub entropy_rate: Option<f64>,
    /// Expected per-token NLL of the source at this sequence length.
    pub source_entropy: Option<f64>,
}

fn config_error(msg: String) -> anyhow::Error {
    Bd3Error::Config(msg).into()
}

fn dataset(args: &EvalArgs, cfg: Option<&(ExperimentConfig, PathBuf)>) -> Result<Vec<Vec<usize>>> {
    if let Some(p) = &args.data {
        return Ok(read_sequences(p)?);
    }
    let (cfg, base) = cfg.ok_or_else(|| config_error("no --data and no config to draw the dataset from".into()))?;
    let data = cfg.prepare_data(base)?;
    Ok(match args.split {
        Split::Train => data.train,
        Split::Val => data.val,
    })
}

fn summarize(model: &dyn DenoisingModel, seqs: &[Vec<usize>], bs: usize, args: &EvalArgs) -> Result<EvalSummary> {
    let tokens = seqs.iter().map(Vec::len).sum();
    let (mean, se) = match args.mode {
        EvalMode::Nelbo => {
            let r = eval_nelbo_linear(model, seqs, bs, args.draws, &mut SplitRng::new(args.seed))?;
            (r.nats_per_token, r.std_error)
        }
        EvalMode::Exact => {
            let r = exact_eval(model, seqs, bs)?;
            (r.nats_per_token, r.std_error)
        }
        EvalMode::Ar => {
            if bs != 1 {
                return Err(config_error(format!("AR evaluation needs block size 1, not {bs}")));
            }
            let per_seq = seqs
                .iter()
                .map(|x| {
                    let masked = vec![model.mask_id(); x.len()];
                    Ok(ar_nll(&model.block_log_probs(x, &masked, 1)?, x)?.nats_per_token())
                })
                .collect::<Result<Vec<f64>>>()?;
            let (m, sd) = mean_sd(&per_seq);
            (m, sd / (per_seq.len() as f64).sqrt())
        }
    };
    Ok(EvalSummary {
        nats_per_token: mean,
        perplexity: mean.exp(),
        std_error: se,
        ci_low: mean - 3.0 * se,
        ci_high: mean + 3.0 * se,
        sequences: seqs.len(),
        tokens,
        entropy_rate: None,
        source_entropy: None,
    })
}

fn check_shapes(seqs: &[Vec<usize>], bs: usize, max_len: Option<usize>) -> Result<()> {
    if seqs.is_empty() {
        return Err(Bd3Error::Data("evaluation set is empty".into()).into());
    }
    for s in seqs {
        if let Some(m) = max_len {
            if s.len() > m {
                return Err(config_error(format!(
                    "sequence of length {} exceeds the checkpoint context {m}",
                    s.len()
                )));
            }
        }
        check_block_size(s.len(), bs)?;
    }
    Ok(())
}

pub fn run(args: &EvalArgs) -> Result<EvalSummary> {
    let cfg = find_config(args.config.as_deref(), args.ckpt.as_deref())?;
    let seqs = dataset(args, cfg.as_ref())?;
    let source = match &cfg {
        Some((c, base)) => c.prepare_data(base)?.source,
        None => None,
    };
    let (label, mut summary, bs) = if args.oracle {
        let Some(src) = source.clone() else {
            return Err(config_error("--oracle needs a config with a markov data section".into()));
        };
        let bs = args.block_size.or(cfg.as_ref().map(|c| c.0.model.block_size)).unwrap_or(1);
        check_shapes(&seqs, bs, None)?;
        let oracle = MarkovOracle::new(src, bs)?;
        ("oracle".to_string(), summarize(&oracle, &seqs, bs, args)?, bs)
    } else {
        let ckpt = args.ckpt.as_deref().expect("clap requires --ckpt");
        let (model, _) = Bd3Model::load(ckpt)?;
        let bs = model.config.block_size;
        if let Some(b) = args.block_size {
            if b != bs {
                return Err(config_error(format!("block size {b} does not match the checkpoint's {bs}")));
            }
        }
        check_shapes(&seqs, bs, Some(model.config.max_len))?;
        (ckpt.display().to_string(), summarize(&model, &seqs, bs, args)?, bs)
    };
    summary.entropy_rate = source.as_ref().map(|s| s.entropy_rate());
    summary.source_entropy = source.as_ref().map(|s| s.per_token_entropy(seqs[0].len()));

    println!(
        "{label}: NELBO {:.4} nats/token, perplexity {:.3}, 3-sigma CI [{:.4}, {:.4}] over {} sequences",
        summary.nats_per_token, summary.perplexity, summary.ci_low, summary.ci_high, summary.sequences
    );
    if let (Some(rate), Some(h)) = (summary.entropy_rate, summary.source_entropy) {
        println!(
            "source entropy rate {rate:.4} nats/token (perplexity {:.3}); {h:.4} nats/token at this length",
            rate.exp()
        );
    }

    let out = match (&args.out, &args.ckpt) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(c)) => Some(parent_dir(c).join("eval.tsv")),
        (None, None) => None,
    };
    if let Some(out) = out {
        check_output(&out)?;
        write_report(&out, &label, bs, args, &summary)?;
        record_output(&out)?;
    }
    Ok(summary)
}

fn write_report(path: &Path, label: &str, bs: usize, args: &EvalArgs, s: &EvalSummary) -> Result<()> {
    let mut r = Report::new(
        "eval",
        &[
            "model",
            "mode",
            "block_size",
            "draws",
            "seed",
            "sequences",
            "tokens",
            "nats_per_token",
            "perplexity",
            "std_error",
            "ci_low",
            "ci_high",
            "entropy_rate",
            "source_entropy",
        ],
    );
    let mode = serde_json::to_value(args.mode)?.as_str().unwrap_or_default().to_string();
    r.push(vec![
        label.to_string(),
        mode,
        bs.to_string(),
        args.draws.to_string(),
        args.seed.to_string(),
        s.sequences.to_string(),
        s.tokens.to_string(),
        format!("{:.6}", s.nats_per_token),
        format!("{:.6}", s.perplexity),
        format!("{:.6}", s.std_error),
        format!("{:.6}", s.ci_low),
        format!("{:.6}", s.ci_high),
        s.entropy_rate.map_or_else(String::new, |h| format!("{h:.6}")),
        s.source_entropy.map_or_else(String::new, |h| format!("{h:.6}")),
    ]);
    r.append_to(path)
}
