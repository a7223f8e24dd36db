use std::path::{Path, PathBuf};

use anyhow::Result;
use bd3lm::config::ExperimentConfig;
use bd3lm::denoiser::Bd3Model;
use bd3lm::training::{load_training_checkpoint, train_run, write_sequences, TrainOutcome, TrainRun};
use bd3lm::{Bd3Error, SplitRng};
use clap::Args;

use super::parent_dir;
use crate::rundir::RunDir;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Defaults to `runs/<config file stem>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

pub fn load_config(path: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.resolve()?;
    Ok(cfg)
}

pub fn run(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = load_config(&args.config, args.seed, args.steps)?;
    let data = cfg.prepare_data(&parent_dir(&args.config))?;
    let model_cfg = cfg.model.denoiser(data.vocab_size);
    let run_path = args.run_dir.clone().unwrap_or_else(|| {
        let stem = args.config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        PathBuf::from("runs").join(stem)
    });
    let mut dir = RunDir::open(&run_path, &cfg)?;
    std::fs::write(dir.file("config.toml"), cfg.to_toml()?)?;
    data.vocabulary.save(&dir.file("vocab.txt"))?;
    write_sequences(&dir.file("val.txt"), &data.val)?;
    for f in ["config.toml", "vocab.txt", "val.txt"] {
        dir.record(f)?;
    }

    let (model, resume) = match &args.resume {
        Some(p) => {
            let (model, opt, state) = load_training_checkpoint(p, cfg.train.optim)?;
            if model.config != model_cfg {
                return Err(Bd3Error::Config(format!("{} does not match the configured model", p.display())).into());
            }
            (model, Some((opt, state)))
        }
        None => (Bd3Model::new(model_cfg, &mut SplitRng::new(cfg.seed))?, None),
    };
    let start = resume.as_ref().map_or(0, |r| r.1.step);
    let outcome = train_run(
        &TrainRun {
            config: &cfg.train,
            train: &data.train,
            val: &data.val,
            out_dir: Some(&dir.path),
        },
        model,
        resume,
    )?;
    for f in ["metrics.jsonl", "last.ckpt", "best.ckpt"] {
        dir.record(f)?;
    }
    let last_eval = outcome.metrics.iter().rev().find_map(|m| m.eval_nelbo);
    println!(
        "trained steps {}..{} ({} parameters) into {}",
        start,
        outcome.state.step,
        outcome.model.num_parameters(),
        dir.path.display()
    );
    if let Some(e) = last_eval {
        println!("final eval NELBO {e:.4} nats/token (perplexity {:.3})", e.exp());
    }
    if let Some(s) = &data.source {
        println!("source entropy rate {:.4} nats/token", s.entropy_rate());
    }
    Ok(outcome)
}
