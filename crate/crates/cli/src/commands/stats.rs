use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use bd3lm::Bd3Error;
use serde::Serialize;

use super::sample::SampleRecord;
use crate::report::Report;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenStats {
    pub samples: usize,
    pub median_length: f64,
    pub max_length: usize,
    /// Samples longer than their model's context.
    pub beyond_context: usize,
    pub stop_reasons: BTreeMap<String, usize>,
    pub mean_entropy: f64,
    pub mean_oracle_nll: Option<f64>,
}

/// Even counts take the mean of the two middle values.
pub fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2] as f64,
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]) as f64,
    }
}

pub fn summarize(records: &[SampleRecord]) -> Result<GenStats> {
    if records.is_empty() {
        return Err(Bd3Error::Data("no samples to summarize".into()).into());
    }
    let lengths: Vec<usize> = records.iter().map(|r| r.length).collect();
    let mut stop_reasons = BTreeMap::new();
    for r in records {
        let key = serde_json::to_value(r.stop_reason)?.as_str().unwrap_or_default().to_string();
        *stop_reasons.entry(key).or_insert(0) += 1;
    }
    let nll: Vec<f64> = records.iter().filter_map(|r| r.oracle_nll).collect();
    Ok(GenStats {
        samples: records.len(),
        median_length: median(&lengths),
        max_length: lengths.iter().copied().max().unwrap_or(0),
        beyond_context: records.iter().filter(|r| r.length > r.context).count(),
        stop_reasons,
        mean_entropy: records.iter().map(|r| r.mean_entropy).sum::<f64>() / records.len() as f64,
        mean_oracle_nll: (!nll.is_empty()).then(|| nll.iter().sum::<f64>() / nll.len() as f64),
    })
}

/// Every record in the `*.stats.jsonl` files directly under `dir`.
pub fn load_records(dir: &Path) -> Result<Vec<SampleRecord>> {
    if !dir.is_dir() {
        return Err(Bd3Error::Data(format!("{} is not a directory", dir.display())).into());
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".stats.jsonl")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        for line in fs::read_to_string(&p)?.lines().filter(|l| !l.trim().is_empty()) {
            out.push(serde_json::from_str(line).map_err(|e| Bd3Error::Data(format!("{}: {e}", p.display())))?);
        }
    }
    Ok(out)
}

pub fn run(dir: &Path, out: Option<&Path>) -> Result<GenStats> {
    let stats = summarize(&load_records(dir)?)?;
    let histogram: Vec<String> = stats.stop_reasons.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let mut r = Report::new(
        "gen-stats",
        &[
            "samples",
            "median_length",
            "max_length",
            "beyond_context",
            "stop_reasons",
            "mean_entropy",
            "mean_oracle_nll",
        ],
    );
    r.push(vec![
        stats.samples.to_string(),
        format!("{}", stats.median_length),
        stats.max_length.to_string(),
        stats.beyond_context.to_string(),
        histogram.join(","),
        format!("{:.4}", stats.mean_entropy),
        stats.mean_oracle_nll.map_or_else(String::new, |v| format!("{v:.4}")),
    ]);
    println!("{}", r.render());
    if let Some(p) = out {
        super::check_output(p)?;
        r.append_to(p)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bd3lm::sampling::StopReason;

    fn rec(length: usize, stop_reason: StopReason) -> SampleRecord {
        SampleRecord {
            version: String::new(),
            index: 0,
            seed: 0,
            length,
            nfe: length,
            blocks: 1,
            stop_reason,
            degenerate: false,
            regenerations: 0,
            mean_entropy: 1.0,
            context: 8,
            oracle_nll: None,
        }
    }

    #[test]
    fn single_sample() {
        let s = summarize(&[rec(7, StopReason::Eos)]).unwrap();
        assert_eq!((s.median_length, s.max_length), (7.0, 7));
    }

    #[test]
    fn even_count_median_is_the_middle_mean() {
        let s = summarize(&[rec(4, StopReason::MaxBlocks), rec(10, StopReason::Eos)]).unwrap();
        assert_eq!((s.median_length, s.max_length), (7.0, 10));
        assert_eq!(s.beyond_context, 1);
        assert_eq!(s.stop_reasons["eos"], 1);
        assert_eq!(s.stop_reasons["max_blocks"], 1);
    }

    #[test]
    fn empty_input_is_a_data_error() {
        let err = summarize(&[]).unwrap_err();
        assert!(matches!(err.downcast_ref::<Bd3Error>(), Some(Bd3Error::Data(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(run(dir.path(), None).is_err());
    }
}
