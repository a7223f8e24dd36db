//! The acceptance suite: eleven end-to-end checks, each returning a
//! pass/fail verdict with a one-line summary.

mod exact;
mod learning;
mod stochastic;

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::masks::{AttentionMaskSpec, MaskKind};

pub use learning::{exact_eval, ExactEval};

/// Builds the 2L×2L training mask for (L, L′). Swappable so a corrupted
/// implementation can be run through the mask criterion.
pub type MaskBuilder = fn(usize, usize) -> Result<AttentionMaskSpec>;

#[derive(Debug, Clone)]
pub struct Options {
    pub seed: u64,
    pub mask_builder: MaskBuilder,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_builder: AttentionMaskSpec::full,
        }
    }
}

/// The training mask with one leak: the first noisy query of block 1 may
/// see its own clean block.
pub fn corrupted_full_mask(len: usize, block_size: usize) -> Result<AttentionMaskSpec> {
    let spec = AttentionMaskSpec::full(len, block_size)?.to_explicit();
    let MaskKind::Explicit(m) = &spec.kind else {
        unreachable!("to_explicit")
    };
    let mut m = (**m).clone();
    if len > block_size {
        m[block_size * spec.cols + len + block_size] = true;
    } else {
        // one block: let a clean query see a noisy key instead
        m[len * spec.cols] = true;
    }
    Ok(AttentionMaskSpec {
        kind: MaskKind::Explicit(std::sync::Arc::new(m)),
        ..spec
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// Stated wall-time limit.
    pub budget_seconds: f64,
}

type Check = fn(&Options) -> Result<Verdict>;

pub const CRITERIA: [(usize, &str, f64, Check); 11] = [
    (1, "AR equivalence at L'=1", 10.0, exact::ar_equivalence),
    (2, "vectorized equals looped training", 30.0, exact::vectorized_equals_looped),
    (3, "mask bit-exactness", 10.0, exact::mask_bit_exactness),
    (4, "upper bound vs Markov oracle", 900.0, learning::upper_bound_vs_oracle),
    (5, "tightness ordering", 60.0, exact::tightness_ordering),
    (6, "schedule invariance", 120.0, stochastic::schedule_invariance),
    (7, "variance reduction direction", 600.0, stochastic::variance_reduction),
    (8, "sampler invariants", 300.0, stochastic::sampler_invariants),
    (9, "variable-length generation", 600.0, learning::variable_length),
    (10, "performance directions", 300.0, learning::performance_directions),
    (11, "numerical hygiene", 60.0, exact::numerical_hygiene),
];

/// Runs criterion `id`. Errors count as failures. Exceeding the time budget
/// also fails the criterion.
pub fn run_criterion(id: usize, options: &Options) -> Option<CriterionResult> {
    let &(id, name, budget, check) = CRITERIA.iter().find(|c| c.0 == id)?;
    let start = Instant::now();
    let verdict = check(options).unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    let seconds = start.elapsed().as_secs_f64();
    let (passed, detail) = if verdict.passed && seconds > budget {
        (false, format!("{} (over the {budget:.0} s budget)", verdict.detail))
    } else {
        (verdict.passed, verdict.detail)
    };
    Some(CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds,
        budget_seconds: budget,
    })
}

/// Runs the selected criteria (all when `ids` is empty) in order, calling
/// `report` after each.
pub fn run_all(options: &Options, ids: &[usize], mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    for &(id, ..) in CRITERIA.iter() {
        if !ids.is_empty() && !ids.contains(&id) {
            continue;
        }
        if let Some(r) = run_criterion(id, options) {
            report(&r);
            out.push(r);
        }
    }
    out
}

/// `PASS  3 mask bit-exactness (0.42 s): detail`
pub fn format_line(r: &CriterionResult) -> String {
    format!(
        "{} {:>2} {} ({:.2} s): {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.id,
        r.name,
        r.seconds,
        r.detail
    )
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
