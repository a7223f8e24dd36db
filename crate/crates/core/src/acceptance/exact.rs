//! Deterministic criteria: equivalences, masks, tightness, finite differences.

use super::{max_abs_diff, Options, Verdict};
use crate::data::{MarkovSource, TokenSequence};
use crate::denoiser::{Bd3Model, BlockDenoiser, DenoiserConfig, DenoisingModel};
use crate::error::Result;
use crate::masks::{assemble_quadrants, attention::attention_forward, default_tiles, dense_attention_reference, AttnDims};
use crate::objectives::{ar_loss, ar_nll, batch_loss, exact_nelbo_linear, nelbo_estimate, BatchPlan, LossMode, MarkovOracle};
use crate::rng::SplitRng;
use crate::sampling::nucleus_filter;
use crate::schedule::NoiseSchedule;
use crate::tensor::gradcheck::{check_param_gradients, primitive_suite, random_coordinates};
use crate::tensor::Gradients;

fn tiny(vocab_size: usize, max_len: usize, block_size: usize) -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size,
        max_len,
        block_size,
    }
}

fn random_seq(rng: &mut SplitRng, n: usize, symbols: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(symbols)).collect()
}

fn grad_gap(model: &Bd3Model, a: Option<Gradients>, b: Option<Gradients>) -> f64 {
    let (a, b) = (a.expect("requested"), b.expect("requested"));
    max_abs_diff(&a.flatten(&model.params), &b.flatten(&model.params))
}

pub(super) fn ar_equivalence(opts: &Options) -> Result<Verdict> {
    let (mut value_gap, mut grad_err) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for (len, vocab) in [(1, 2), (4, 3), (8, 5), (12, 8), (16, 8)] {
        for s in 0..3 {
            let mut rng = SplitRng::new(opts.seed ^ (len as u64 * 100 + vocab as u64 * 10 + s));
            let model = Bd3Model::new(tiny(vocab, len, 1), &mut rng)?;
            let x = random_seq(&mut rng, len, vocab - 1);
            let ar = ar_nll(&model.looped_forward(&x, &vec![vocab - 1; len], 1)?, &x)?;
            let nelbo = nelbo_estimate(&TokenSequence::new(x.clone(), 1)?, &model, &NoiseSchedule::FullMask, &mut rng, 1)?;
            value_gap = value_gap.max(max_abs_diff(&ar.per_block, &nelbo.per_block));
            let (per_token, g_ar) = ar_loss(&model, &x, true)?;
            value_gap = value_gap.max(max_abs_diff(&per_token, &ar.per_block));
            let plan = BatchPlan::all_masked(&[x], 1, vocab - 1)?;
            let (_, g_vec) = batch_loss(&model, &plan, LossMode::Vectorized, true)?;
            grad_err = grad_err.max(grad_gap(&model, g_ar, g_vec));
            cases += 1;
        }
    }
    Ok(Verdict::new(
        value_gap < 1e-10 && grad_err < 1e-8,
        format!("{cases} nets, max per-token gap {value_gap:.1e} (< 1e-10), max gradient gap {grad_err:.1e} (< 1e-8)"),
    ))
}

pub(super) fn vectorized_equals_looped(opts: &Options) -> Result<Verdict> {
    let (mut loss_gap, mut grad_err) = (0.0f64, 0.0f64);
    for (len, bs) in [(4, 1), (8, 2), (8, 4), (8, 8)] {
        for s in 0..5 {
            let mut rng = SplitRng::new(opts.seed ^ (1000 + len as u64 * 10 + bs as u64 + 100 * s));
            let model = Bd3Model::new(tiny(6, len, bs), &mut rng)?;
            let seqs: Vec<Vec<usize>> = (0..3).map(|_| random_seq(&mut rng, len, 5)).collect();
            let plan = BatchPlan::sample(&seqs, bs, &NoiseSchedule::Linear, 5, &mut rng)?;
            let (a, ga) = batch_loss(&model, &plan, LossMode::TwoPass, true)?;
            let (b, gb) = batch_loss(&model, &plan, LossMode::Vectorized, true)?;
            loss_gap = loss_gap.max((a.loss - b.loss).abs()).max(max_abs_diff(&a.per_token, &b.per_token));
            grad_err = grad_err.max(grad_gap(&model, ga, gb));
            for (i, seq) in seqs.iter().enumerate() {
                let noisy = &plan.noisy[i * len..(i + 1) * len];
                let looped = model.looped_forward(seq, noisy, bs)?;
                let vectorized = model.vectorized_forward(seq, noisy, bs)?;
                let finite: Vec<(f64, f64)> = looped
                    .data()
                    .iter()
                    .zip(vectorized.data())
                    .filter(|(x, y)| x.is_finite() || y.is_finite())
                    .map(|(&x, &y)| (x, y))
                    .collect();
                let gap = finite.iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                loss_gap = loss_gap.max(if gap.is_nan() { f64::INFINITY } else { gap });
            }
        }
    }
    Ok(Verdict::new(
        loss_gap < 1e-10 && grad_err < 1e-8,
        format!("4 settings x 5 seeds, max loss/log-prob gap {loss_gap:.1e} (< 1e-10), max gradient gap {grad_err:.1e} (< 1e-8)"),
    ))
}

/// Allowed rectangles (rows, columns) of the L = 6, L′ = 2 example figure.
const FIGURE_ALLOWED: [((usize, usize), (usize, usize)); 8] = [
    ((0, 2), (0, 2)),
    ((2, 4), (2, 4)),
    ((4, 6), (4, 6)),
    ((2, 6), (6, 8)),
    ((4, 6), (8, 10)),
    ((6, 12), (6, 8)),
    ((8, 12), (8, 10)),
    ((10, 12), (10, 12)),
];

fn figure_mask() -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; 12]; 12];
    for ((r0, r1), (c0, c1)) in FIGURE_ALLOWED {
        for row in m.iter_mut().take(r1).skip(r0) {
            row[c0..c1].iter_mut().for_each(|x| *x = true);
        }
    }
    m
}

pub(super) fn mask_bit_exactness(opts: &Options) -> Result<Verdict> {
    let mut problems = Vec::new();
    let mut attn_gap = 0.0f64;
    let mut rng = SplitRng::new(opts.seed ^ 3);
    for (len, bs) in [(4, 1), (4, 2), (6, 2), (8, 4), (16, 16)] {
        let mask = (opts.mask_builder)(len, bs)?;
        if mask.to_dense() != assemble_quadrants(len, bs)? {
            problems.push(format!("L={len} L'={bs} differs from the quadrant composition"));
        }
        if len == 6 && bs == 2 && mask.to_dense() != figure_mask() {
            problems.push("L=6 L'=2 differs from the example figure".to_string());
        }
        let tiles = default_tiles(&mask)?;
        let n = 2 * len;
        let dims = AttnDims {
            batch: 2,
            nq: n,
            nk: n,
            d: 8,
            heads: 2,
        };
        let mut rand = || -> Vec<f64> { (0..2 * n * 8).map(|_| rng.normal()).collect() };
        let (q, k, v) = (rand(), rand(), rand());
        let (sparse, _) = attention_forward(&q, &k, &v, dims, &mask, &tiles)?;
        let dense = dense_attention_reference(&q, &k, &v, dims, &mask)?;
        attn_gap = attn_gap.max(max_abs_diff(&sparse, &dense));
    }
    let passed = problems.is_empty() && attn_gap < 1e-12;
    let mut detail = format!("5 settings plus the L=6 L'=2 figure, sparse vs dense gap {attn_gap:.1e} (< 1e-12)");
    if !problems.is_empty() {
        detail = format!("{detail}; {}", problems.join("; "));
    }
    Ok(Verdict::new(passed, detail))
}

pub(super) fn tightness_ordering(opts: &Options) -> Result<Verdict> {
    let nets = 20;
    let mut held = 0;
    let mut worst = 0.0f64;
    for net in 0..nets {
        let mut rng = SplitRng::new(opts.seed ^ (5000 + net));
        let model = Bd3Model::new(tiny(6, 4, 4), &mut rng)?;
        let mut ok = true;
        for _ in 0..4 {
            let x = random_seq(&mut rng, 4, 5);
            let mut prev = f64::NEG_INFINITY;
            for bs in [1, 2, 4] {
                let v = exact_nelbo_linear(&TokenSequence::new(x.clone(), bs)?, &model)?.total;
                if v < prev - 1e-9 {
                    ok = false;
                    worst = worst.max(prev - v);
                }
                prev = v;
            }
        }
        held += ok as usize;
    }
    Ok(Verdict::new(
        held == nets as usize,
        format!("ordering L'=1 <= L'=2 <= L'=4 held on {held}/{nets} random nets (largest violation {worst:.3} nats)"),
    ))
}

pub(super) fn numerical_hygiene(opts: &Options) -> Result<Verdict> {
    let mut rng = SplitRng::new(opts.seed ^ 11);
    let mut fd_err = primitive_suite(&mut rng)?.into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    for (len, bs, mode) in [
        (8, 2, LossMode::Vectorized),
        (8, 4, LossMode::TwoPass),
        (6, 3, LossMode::Vectorized),
    ] {
        let mut model = Bd3Model::new(tiny(5, len, bs), &mut rng)?;
        let seqs: Vec<Vec<usize>> = (0..2).map(|_| random_seq(&mut rng, len, 4)).collect();
        let plan = BatchPlan::sample(&seqs, bs, &NoiseSchedule::Cosine, 4, &mut rng)?;
        let (_, grads) = batch_loss(&model, &plan, mode, true)?;
        let coords = random_coordinates(&model.params, 12, &mut rng);
        let frozen = model.clone();
        let report = check_param_gradients(&mut model.params, &grads.expect("requested"), &coords, |store| {
            let mut m = frozen.clone();
            m.params = store.clone();
            Ok(batch_loss(&m, &plan, mode, false)?.0.loss)
        })?;
        fd_err = fd_err.max(report.max_rel_err);
    }

    let mut mass_err = 0.0f64;
    let mut check = |row: &[f64]| mass_err = mass_err.max((row.iter().sum::<f64>() - 1.0).abs());
    let source = MarkovSource::random(1, 5, 2.0, &mut rng)?;
    source.transitions().chunks(5).for_each(&mut check);
    check(source.stationary());
    let model = Bd3Model::new(tiny(6, 8, 4), &mut rng)?;
    let x = source.sample(8, &mut rng);
    let noisy: Vec<usize> = x.iter().map(|&t| if rng.bernoulli(0.5) { 5 } else { t }).collect();
    let lp = model.vectorized_forward(&x, &noisy, 4)?;
    for r in 0..8 {
        check(&lp.row(r).iter().map(|v| v.exp()).collect::<Vec<_>>());
    }
    let state = BlockDenoiser::prefix_state(&model, &x[..4])?;
    model.denoise(&state, &noisy[4..])?.iter().for_each(|r| check(r));
    let oracle = MarkovOracle::new(source, 4)?;
    oracle.denoise(&x[..4].to_vec(), &noisy[4..])?.iter().for_each(|r| check(r));
    let olp = oracle.block_log_probs(&x, &noisy, 4)?;
    for r in 0..8 {
        check(&olp.row(r).iter().map(|v| v.exp()).collect::<Vec<_>>());
    }
    for _ in 0..50 {
        let p: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let filtered = nucleus_filter(&p, rng.uniform_range(0.05, 1.0))?;
        check(&filtered);
        let mut logits: Vec<f64> = (0..10).map(|_| 20.0 * rng.normal()).collect();
        crate::tensor::kernels::softmax_row(&mut logits);
        check(&logits);
    }
    Ok(Verdict::new(
        fd_err < 1e-4 && mass_err < 1e-9,
        format!("max finite-difference relative error {fd_err:.1e} (< 1e-4), max normalization error {mass_err:.1e} (< 1e-9)"),
    ))
}
