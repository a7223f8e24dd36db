use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use bd3lm::denoiser::Bd3Model;
use bd3lm::sampling::{generate, EntropyStop, LengthMode, SamplerConfig, StopReason, WithinBlock};
use bd3lm::SplitRng;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use super::{check_output, find_config, find_vocabulary, parent_dir};
use crate::report::VERSION;
use crate::rundir::record_output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LengthArg {
    Fixed,
    Sliding,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// `ancestral:T` or `first-hitting`.
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<WithinBlock>,
    #[arg(long)]
    pub nucleus: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples to draw; sample i uses seed + i.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum)]
    pub length_mode: Option<LengthArg>,
    /// Stop when the trailing window's mean predictive entropy drops below this many nats.
    #[arg(long)]
    pub entropy_threshold: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub entropy_window: usize,
    /// Redraw an entropy-stopped sample up to this many times.
    #[arg(long, default_value_t = 0)]
    pub regenerate: usize,
    /// Text output, one sample per line. Stats go to `<out>.stats.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sampler(s: &str) -> Result<WithinBlock, String> {
    WithinBlock::parse(s).map_err(|e| e.to_string())
}

/// One line of the stats sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub version: String,
    pub index: usize,
    pub seed: u64,
    pub length: usize,
    pub nfe: usize,
    pub blocks: usize,
    pub stop_reason: StopReason,
    pub degenerate: bool,
    pub regenerations: usize,
    /// Mean predictive entropy of the generated tokens, nats.
    pub mean_entropy: f64,
    /// Model context length, for comparing sample lengths against it.
    pub context: usize,
    /// Per-token NLL under the data source, for synthetic data.
    pub oracle_nll: Option<f64>,
}

pub fn stats_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".stats.jsonl");
    out.with_file_name(name)
}

pub fn run(args: &SampleArgs) -> Result<Vec<SampleRecord>> {
    check_output(&args.out)?;
    let (model, _) = Bd3Model::load(&args.ckpt)?;
    let cfg = find_config(args.config.as_deref(), Some(&args.ckpt))?;
    let mut sampler = cfg.as_ref().map(|c| c.0.sampler.clone()).unwrap_or_default();
    let source = match &cfg {
        Some((c, base)) => c.prepare_data(base)?.source,
        None => None,
    };
    let vocab = find_vocabulary(&parent_dir(&args.ckpt), model.config.vocab_size)?;
    if let Some(b) = args.blocks {
        sampler.max_blocks = b;
    }
    if let Some(s) = args.sampler {
        sampler.sampler = s;
    }
    if let Some(p) = args.nucleus {
        sampler.nucleus = p;
    }
    if let Some(s) = args.seed {
        sampler.seed = s;
    }
    if let Some(m) = args.length_mode {
        sampler.length_mode = match m {
            LengthArg::Fixed => LengthMode::Fixed,
            LengthArg::Sliding => LengthMode::Sliding,
        };
    }
    if let Some(threshold) = args.entropy_threshold {
        sampler.entropy_stop = Some(EntropyStop {
            threshold,
            window: args.entropy_window,
        });
    }
    if sampler.eos.is_none() {
        sampler.eos = vocab.eos_id();
    }
    sampler.validate()?;

    let mut text = BufWriter::new(File::create(&args.out)?);
    let mut stats = BufWriter::new(File::create(stats_path(&args.out))?);
    let mut records = Vec::with_capacity(args.count);
    for index in 0..args.count {
        let seed = sampler.seed.wrapping_add(index as u64);
        let mut cfg = SamplerConfig { seed, ..sampler.clone() };
        let mut g = generate(&model, &[], &cfg)?;
        let mut regenerations = 0;
        while g.stats.degenerate && regenerations < args.regenerate {
            regenerations += 1;
            cfg.seed = SplitRng::stream(seed, regenerations as u64).next_seed();
            g = generate(&model, &[], &cfg)?;
        }
        let generated = g.generated();
        let mean_entropy = if g.entropies.is_empty() {
            0.0
        } else {
            g.entropies.iter().sum::<f64>() / g.entropies.len() as f64
        };
        let oracle_nll = match (&source, generated.is_empty()) {
            (Some(s), false) => Some(s.exact_nll(generated)? / generated.len() as f64),
            _ => None,
        };
        writeln!(text, "{}", vocab.detokenize(generated))?;
        let rec = SampleRecord {
            version: VERSION.to_string(),
            index,
            seed: cfg.seed,
            length: g.stats.length,
            nfe: g.stats.nfe,
            blocks: g.stats.blocks,
            stop_reason: g.stats.stop_reason,
            degenerate: g.stats.degenerate,
            regenerations,
            mean_entropy,
            context: model.config.max_len,
            oracle_nll,
        };
        serde_json::to_writer(&mut stats, &rec)?;
        stats.write_all(b"\n")?;
        records.push(rec);
    }
    text.flush()?;
    stats.flush()?;
    record_output(&args.out)?;
    record_output(&stats_path(&args.out))?;

    let tokens: usize = records.iter().map(|r| r.length).sum();
    let nfe: usize = records.iter().map(|r| r.nfe).sum();
    println!(
        "wrote {} samples ({tokens} tokens, {nfe} NFE) to {}",
        records.len(),
        args.out.display()
    );
    Ok(records)
}
