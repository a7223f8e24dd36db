//! Multi-head masked attention kernels.
//!
//! Rows of `q`, `k`, `v` are tokens; `batch` sequences are stacked along rows
//! and share one mask. Head `h` owns columns `h*dh..(h+1)*dh`.

use super::{AttentionMaskSpec, BlockSparsityIndex, KeyRun};
use crate::error::{Bd3Error, Result};
use crate::tensor::kernels::{axpy, dot};
use crate::tensor::Tensor;

/// Logit used for denied entries by the dense reference.
pub const DENIED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn check(dims: AttnDims, mask: &AttentionMaskSpec, q: &[f64], k: &[f64], v: &[f64]) -> Result<()> {
    if mask.rows != dims.nq || mask.cols != dims.nk {
        return Err(Bd3Error::dim(format!(
            "mask is {}x{}, attention is {}x{}",
            mask.rows, mask.cols, dims.nq, dims.nk
        )));
    }
    if q.len() != dims.batch * dims.nq * dims.d || k.len() != dims.batch * dims.nk * dims.d || v.len() != k.len() {
        return Err(Bd3Error::dim("attention buffer sizes disagree with dims"));
    }
    Ok(())
}

/// Fills `allow` for the partial runs of one query row; returns whether any key is allowed.
fn row_allowance(mask: &AttentionMaskSpec, row: usize, runs: &[KeyRun], allow: &mut [bool]) -> bool {
    let mut any = false;
    for r in runs {
        if r.partial {
            for j in r.start..r.end {
                let a = mask.allowed(row, j);
                allow[j] = a;
                any |= a;
            }
        } else if r.end > r.start {
            any = true;
        }
    }
    any
}

/// Sparse forward pass. Returns the output and the per-(sequence, head, row)
/// log-normalizer needed by the backward pass.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
    mask: &AttentionMaskSpec,
    tiles: &BlockSparsityIndex,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check(dims, mask, q, k, v)?;
    if !tiles.matches(mask) {
        return Err(Bd3Error::dim("tile index does not match mask"));
    }
    let AttnDims { batch, nq, nk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * nq * d];
    let mut lse = vec![0.0; batch * heads * nq];
    let mut scores = vec![0.0; nk];
    let mut allow = vec![true; nk];

    for i in 0..nq {
        let runs = tiles.runs(i / tiles.tile);
        if !row_allowance(mask, i, runs, &mut allow) {
            return Err(Bd3Error::MaskDegenerate { row: i });
        }
        for b in 0..batch {
            let qrow = (b * nq + i) * d;
            for h in 0..heads {
                let qi = &q[qrow + h * dh..qrow + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for r in runs {
                    for j in r.start..r.end {
                        if r.partial && !allow[j] {
                            continue;
                        }
                        let kr = (b * nk + j) * d + h * dh;
                        let s = dot(qi, &k[kr..kr + dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                for r in runs {
                    for j in r.start..r.end {
                        if r.partial && !allow[j] {
                            continue;
                        }
                        let p = (scores[j] - max).exp();
                        scores[j] = p;
                        sum += p;
                    }
                }
                let inv = 1.0 / sum;
                let o = &mut out[qrow + h * dh..qrow + (h + 1) * dh];
                for r in runs {
                    for j in r.start..r.end {
                        if r.partial && !allow[j] {
                            continue;
                        }
                        let vr = (b * nk + j) * d + h * dh;
                        axpy(scores[j] * inv, &v[vr..vr + dh], o);
                    }
                }
                lse[(b * heads + h) * nq + i] = max + sum.ln();
            }
        }
    }
    Ok((out, lse))
}

/// Accumulates gradients into `dq`, `dk`, `dv`, recomputing attention weights
/// from the stored log-normalizers.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    dout: &[f64],
    dims: AttnDims,
    mask: &AttentionMaskSpec,
    tiles: &BlockSparsityIndex,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let AttnDims { batch, nq, nk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut allow = vec![true; nk];

    for i in 0..nq {
        let runs = tiles.runs(i / tiles.tile);
        row_allowance(mask, i, runs, &mut allow);
        for b in 0..batch {
            let qrow = (b * nq + i) * d;
            for h in 0..heads {
                let cols = qrow + h * dh..qrow + (h + 1) * dh;
                let qi = &q[cols.clone()];
                let doi = &dout[cols.clone()];
                let delta = dot(doi, &out[cols.clone()]);
                let l = lse[(b * heads + h) * nq + i];
                for r in runs {
                    for j in r.start..r.end {
                        if r.partial && !allow[j] {
                            continue;
                        }
                        let kr = (b * nk + j) * d + h * dh;
                        let kj = &k[kr..kr + dh];
                        let p = (dot(qi, kj) * scale - l).exp();
                        axpy(p, doi, &mut dv[kr..kr + dh]);
                        let dp = dot(doi, &v[kr..kr + dh]);
                        let ds = p * (dp - delta) * scale;
                        axpy(ds, kj, &mut dq[cols.clone()]);
                        axpy(ds, qi, &mut dk[kr..kr + dh]);
                    }
                }
            }
        }
    }
}

/// Dense reference: every logit computed, denied entries set to a large
/// negative constant before the softmax.
pub fn dense_attention_reference(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims, mask: &AttentionMaskSpec) -> Result<Vec<f64>> {
    check(dims, mask, q, k, v)?;
    let AttnDims { batch, nq, nk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * nq * d];
    let mut scores = vec![0.0; nk];
    let mut allow = vec![false; nk];
    for i in 0..nq {
        let mut any = false;
        for (j, a) in allow.iter_mut().enumerate() {
            *a = mask.allowed(i, j);
            any |= *a;
        }
        if !any {
            return Err(Bd3Error::MaskDegenerate { row: i });
        }
        for b in 0..batch {
            let qrow = (b * nq + i) * d;
            for h in 0..heads {
                let qi = &q[qrow + h * dh..qrow + (h + 1) * dh];
                for j in 0..nk {
                    let kr = (b * nk + j) * d + h * dh;
                    let s = dot(qi, &k[kr..kr + dh]) * scale;
                    scores[j] = if allow[j] { s } else { DENIED_LOGIT };
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                let o = &mut out[qrow + h * dh..qrow + (h + 1) * dh];
                for j in 0..nk {
                    let vr = (b * nk + j) * d + h * dh;
                    axpy(scores[j] * inv, &v[vr..vr + dh], o);
                }
            }
        }
    }
    Ok(out)
}

/// Single-sequence, single-head convenience wrapper over the sparse kernel.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMaskSpec) -> Result<Tensor> {
    let (nq, d) = crate::tensor::as_matrix(q)?;
    let (nk, dk) = crate::tensor::as_matrix(k)?;
    if dk != d || v.shape() != [nk, d] {
        return Err(Bd3Error::dim("q/k/v widths disagree"));
    }
    let tiles = super::default_tiles(mask)?;
    let dims = AttnDims {
        batch: 1,
        nq,
        nk,
        d,
        heads: 1,
    };
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), dims, mask, &tiles)?;
    Tensor::new(vec![nq, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::tile_sparsity;
    use crate::rng::SplitRng;

    fn random(rng: &mut SplitRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn identity_mask_returns_values() {
        let mut rng = SplitRng::new(3);
        let (n, d) = (5, 4);
        let q = Tensor::new(vec![n, d], random(&mut rng, n * d)).unwrap();
        let k = Tensor::new(vec![n, d], random(&mut rng, n * d)).unwrap();
        let v = Tensor::new(vec![n, d], random(&mut rng, n * d)).unwrap();
        let mask = AttentionMaskSpec::block_diagonal(n, 1).unwrap();
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn all_allowed_is_standard_attention() {
        let mut rng = SplitRng::new(4);
        let (n, d) = (3, 2);
        let q = random(&mut rng, n * d);
        let k = random(&mut rng, n * d);
        let v = random(&mut rng, n * d);
        let mask = AttentionMaskSpec::all_allowed(n, n);
        let qt = Tensor::new(vec![n, d], q.clone()).unwrap();
        let kt = Tensor::new(vec![n, d], k.clone()).unwrap();
        let vt = Tensor::new(vec![n, d], v.clone()).unwrap();
        let out = masked_attention(&qt, &kt, &vt, &mask).unwrap();
        // softmax(QKᵀ/√d)V written out by hand
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (q[i * d] * k[j * d] + q[i * d + 1] * k[j * d + 1]) / (d as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..d {
                let o: f64 = (0..n).map(|j| s[j].exp() / z * v[j * d + c]).sum();
                assert!((o - out.data()[i * d + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sparse_matches_dense_full_mask() {
        let mut rng = SplitRng::new(5);
        for (l, bs) in [(4, 1), (4, 2), (6, 2), (8, 2), (8, 4), (16, 16)] {
            let mask = AttentionMaskSpec::full(l, bs).unwrap();
            let dims = AttnDims {
                batch: 2,
                nq: 2 * l,
                nk: 2 * l,
                d: 8,
                heads: 2,
            };
            let n = dims.batch * 2 * l * dims.d;
            let (q, k, v) = (random(&mut rng, n), random(&mut rng, n), random(&mut rng, n));
            for tile in [1, bs, 3] {
                let tiles = tile_sparsity(&mask, tile).unwrap();
                let (sparse, _) = attention_forward(&q, &k, &v, dims, &mask, &tiles).unwrap();
                let dense = dense_attention_reference(&q, &k, &v, dims, &mask).unwrap();
                let err = sparse.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-12, "L={l} L'={bs} tile={tile}: {err}");
            }
        }
    }

    #[test]
    fn degenerate_row_is_an_error() {
        let mask = AttentionMaskSpec::explicit(2, 2, vec![true, false, false, false]).unwrap();
        let t = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            masked_attention(&t, &t, &t, &mask),
            Err(Bd3Error::MaskDegenerate { row: 1 })
        ));
        let dims = AttnDims {
            batch: 1,
            nq: 2,
            nk: 2,
            d: 2,
            heads: 1,
        };
        assert!(dense_attention_reference(t.data(), t.data(), t.data(), dims, &mask).is_err());
    }
}
