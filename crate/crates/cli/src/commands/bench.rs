use std::path::PathBuf;

use anyhow::Result;
use bd3lm::masks::{default_tiles, AttentionMaskSpec};
use bd3lm::objectives::LossMode;
use bd3lm::perf::{bench_model, time_attention, time_train_step, Timing};
use bd3lm::sampling::{generate, SamplerConfig, WithinBlock};
use clap::Args;

use crate::report::Report;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Small sizes (attention L=64, steps L=32) for smoke runs.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const FIELDS: [&str; 6] = ["benchmark", "setting", "median_ms", "min_ms", "metric", "value"];

fn timing_row(r: &mut Report, name: &str, setting: &str, t: &Timing, metric: &str, value: String) {
    r.push(vec![
        name.into(),
        setting.into(),
        format!("{:.3}", t.median() * 1e3),
        format!("{:.3}", t.min() * 1e3),
        metric.into(),
        value,
    ]);
}

pub fn run(args: &BenchArgs) -> Result<Report> {
    let (attn_len, step_len, bs) = if args.quick { (64, 32, 4) } else { (1024, 512, 16) };
    let mut r = Report::new("benchmark", &FIELDS);

    let skipped = default_tiles(&AttentionMaskSpec::full(attn_len, bs)?)?.denied_fraction();
    let (dense, sparse) = time_attention(attn_len, bs, 32, 2, args.reps, args.seed)?;
    let setting = format!("L={attn_len} L'={bs}");
    timing_row(&mut r, "attention_dense", &setting, &dense, "tiles_skipped", "0".into());
    timing_row(
        &mut r,
        "attention_sparse",
        &setting,
        &sparse,
        "tiles_skipped",
        format!("{skipped:.4}"),
    );

    let model = bench_model(step_len, bs, args.seed)?;
    let setting = format!("L={step_len} L'={bs}");
    for (name, mode) in [("step_two_pass", LossMode::TwoPass), ("step_vectorized", LossMode::Vectorized)] {
        let t = time_train_step(&model, mode, 1, args.reps, args.seed)?;
        timing_row(&mut r, name, &setting, &t, "batch", "1".into());
    }

    let gen_model = bench_model(64, 4, args.seed)?;
    for (name, sampler) in [
        ("sample_first_hitting", WithinBlock::FirstHitting),
        ("sample_ancestral", WithinBlock::Ancestral { steps: 16 }),
    ] {
        let cfg = SamplerConfig {
            sampler,
            max_blocks: 16,
            seed: args.seed,
            ..SamplerConfig::default()
        };
        let mut nfe_per_token = 0.0;
        let t = bd3lm::perf::time_it(name, 0, args.reps, || {
            let g = generate(&gen_model, &[], &cfg)?;
            nfe_per_token = g.stats.nfe as f64 / g.stats.length as f64;
            Ok(())
        })?;
        timing_row(
            &mut r,
            name,
            "L=64 L'=4 64 tokens",
            &t,
            "nfe_per_token",
            format!("{nfe_per_token:.4}"),
        );
    }

    println!("{}", r.render());
    if let Some(p) = &args.out {
        super::check_output(p)?;
        r.append_to(p)?;
    }
    Ok(r)
}
