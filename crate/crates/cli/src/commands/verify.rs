use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use bd3lm::acceptance::{corrupted_full_mask, format_line, run_all, Options, CRITERIA};
use bd3lm::Bd3Error;
use clap::Args;

use crate::report::Report;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Criterion ids to run; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub criteria: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the training mask with one that has a single wrong entry.
    #[arg(long)]
    pub corrupt_mask: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// True when every selected criterion passed.
pub fn run(args: &VerifyArgs) -> Result<bool> {
    if let Some(id) = args.criteria.iter().find(|&&id| !CRITERIA.iter().any(|c| c.0 == id)) {
        return Err(Bd3Error::Config(format!("no acceptance criterion {id} (valid: 1-{})", CRITERIA.len())).into());
    }
    let mut options = Options {
        seed: args.seed,
        ..Options::default()
    };
    if args.corrupt_mask {
        options.mask_builder = corrupted_full_mask;
    }
    let start = Instant::now();
    let results = run_all(&options, &args.criteria, |r| println!("{}", format_line(r)));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(p) = &args.out {
        super::check_output(p)?;
        let mut r = Report::new("verify", &["id", "name", "passed", "seconds", "budget_seconds", "detail"]);
        for c in &results {
            r.push(vec![
                c.id.to_string(),
                c.name.to_string(),
                c.passed.to_string(),
                format!("{:.3}", c.seconds),
                format!("{:.0}", c.budget_seconds),
                c.detail.clone(),
            ]);
        }
        r.append_to(p)?;
    }
    Ok(failed == 0)
}
