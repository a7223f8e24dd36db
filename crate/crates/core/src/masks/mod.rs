//! Attention mask predicates for block diffusion and their tile index.

pub mod attention;

use std::sync::Arc;

use crate::error::{Bd3Error, Result};

pub use attention::{dense_attention_reference, masked_attention, AttnDims};

/// Elementwise predicate of the 2n×2n vectorized-training mask.
///
/// Indices `< n` address the noisy copy, indices `>= n` the clean copy.
pub fn mask_entry(q_idx: usize, kv_idx: usize, block_size: usize, n: usize) -> Result<bool> {
    if q_idx >= 2 * n || kv_idx >= 2 * n {
        return Err(Bd3Error::Domain(format!("mask index ({q_idx}, {kv_idx}) outside 0..{}", 2 * n)));
    }
    if block_size == 0 {
        return Err(Bd3Error::config("block size must be positive"));
    }
    Ok(full_entry(q_idx, kv_idx, block_size, n))
}

#[inline]
fn full_entry(q: usize, kv: usize, bs: usize, n: usize) -> bool {
    let q_clean = q >= n;
    let kv_clean = kv >= n;
    let bq = if q_clean { (q - n) / bs } else { q / bs };
    let bkv = if kv_clean { (kv - n) / bs } else { kv / bs };
    let block_diagonal = bq == bkv && q_clean == kv_clean;
    let offset_block_causal = bq > bkv && !q_clean && kv_clean;
    let block_causal = bq >= bkv && q_clean && kv_clean;
    block_diagonal || offset_block_causal || block_causal
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    /// Same block only (noisy self-attention).
    BlockDiagonal,
    /// Strictly earlier blocks only (noisy queries over clean keys).
    OffsetBlockCausal,
    /// Own and earlier blocks.
    BlockCausal,
    /// The 2L×2L composite over `noisy ⊕ clean`.
    Full,
    AllAllowed,
    /// Materialized boolean matrix, row-major; meant for small tests.
    Explicit(Arc<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSpec {
    pub kind: MaskKind,
    pub rows: usize,
    pub cols: usize,
    /// Clean sequence length L.
    pub seq_len: usize,
    pub block_size: usize,
}

fn check_blocks(len: usize, block_size: usize) -> Result<()> {
    if block_size == 0 || !len.is_multiple_of(block_size) {
        return Err(Bd3Error::config(format!(
            "block size {block_size} must be positive and divide sequence length {len}"
        )));
    }
    Ok(())
}

impl AttentionMaskSpec {
    fn square(kind: MaskKind, len: usize, block_size: usize) -> Result<Self> {
        check_blocks(len, block_size)?;
        Ok(Self {
            kind,
            rows: len,
            cols: len,
            seq_len: len,
            block_size,
        })
    }

    pub fn block_diagonal(len: usize, block_size: usize) -> Result<Self> {
        Self::square(MaskKind::BlockDiagonal, len, block_size)
    }

    pub fn offset_block_causal(len: usize, block_size: usize) -> Result<Self> {
        Self::square(MaskKind::OffsetBlockCausal, len, block_size)
    }

    pub fn block_causal(len: usize, block_size: usize) -> Result<Self> {
        Self::square(MaskKind::BlockCausal, len, block_size)
    }

    pub fn full(len: usize, block_size: usize) -> Result<Self> {
        check_blocks(len, block_size)?;
        Ok(Self {
            kind: MaskKind::Full,
            rows: 2 * len,
            cols: 2 * len,
            seq_len: len,
            block_size,
        })
    }

    /// The noisy-query half of [`AttentionMaskSpec::full`]: L rows over 2L keys.
    pub fn full_noisy_rows(len: usize, block_size: usize) -> Result<Self> {
        check_blocks(len, block_size)?;
        Ok(Self {
            kind: MaskKind::Full,
            rows: len,
            cols: 2 * len,
            seq_len: len,
            block_size,
        })
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        Self {
            kind: MaskKind::AllAllowed,
            rows,
            cols,
            seq_len: cols,
            block_size: cols.max(1),
        }
    }

    pub fn explicit(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Bd3Error::dim(format!(
                "explicit mask needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Self {
            kind: MaskKind::Explicit(Arc::new(allowed)),
            rows,
            cols,
            seq_len: cols,
            block_size: 1,
        })
    }

    /// Materializes any spec into an explicit one (handy for mutation fixtures).
    pub fn to_explicit(&self) -> Self {
        let mut m = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.push(self.allowed(i, j));
            }
        }
        Self {
            kind: MaskKind::Explicit(Arc::new(m)),
            ..self.clone()
        }
    }

    #[inline]
    pub fn allowed(&self, q: usize, kv: usize) -> bool {
        let bs = self.block_size;
        match &self.kind {
            MaskKind::BlockDiagonal => q / bs == kv / bs,
            MaskKind::OffsetBlockCausal => kv / bs < q / bs,
            MaskKind::BlockCausal => kv / bs <= q / bs,
            MaskKind::Full => full_entry(q, kv, bs, self.seq_len),
            MaskKind::AllAllowed => true,
            MaskKind::Explicit(m) => m[q * self.cols + kv],
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.allowed(i, j)).collect())
            .collect()
    }

    /// First row with no allowed key, if any.
    pub fn degenerate_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| (0..self.cols).all(|j| !self.allowed(i, j)))
    }
}

/// The composite mask assembled from the three L×L pieces as
/// `[[BD, OBC], [0, BC]]`.
pub fn assemble_quadrants(len: usize, block_size: usize) -> Result<Vec<Vec<bool>>> {
    let bd = AttentionMaskSpec::block_diagonal(len, block_size)?;
    let obc = AttentionMaskSpec::offset_block_causal(len, block_size)?;
    let bc = AttentionMaskSpec::block_causal(len, block_size)?;
    let mut out = vec![vec![false; 2 * len]; 2 * len];
    for i in 0..len {
        for j in 0..len {
            out[i][j] = bd.allowed(i, j);
            out[i][len + j] = obc.allowed(i, j);
            out[len + i][len + j] = bc.allowed(i, j);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileState {
    AllAllowed,
    AllDenied,
    Partial,
}

/// A maximal run of consecutive key columns in non-denied tiles of one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyRun {
    pub start: usize,
    pub end: usize,
    pub partial: bool,
}

#[derive(Debug, Clone)]
pub struct BlockSparsityIndex {
    pub tile: usize,
    pub rows: usize,
    pub cols: usize,
    pub q_tiles: usize,
    pub k_tiles: usize,
    states: Vec<TileState>,
    runs: Vec<Vec<KeyRun>>,
}

impl BlockSparsityIndex {
    pub fn state(&self, qt: usize, kt: usize) -> TileState {
        self.states[qt * self.k_tiles + kt]
    }

    pub fn runs(&self, q_tile: usize) -> &[KeyRun] {
        &self.runs[q_tile]
    }

    pub fn count(&self, state: TileState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    pub fn denied_fraction(&self) -> f64 {
        self.count(TileState::AllDenied) as f64 / self.states.len().max(1) as f64
    }

    pub fn num_tiles(&self) -> usize {
        self.states.len()
    }

    pub fn matches(&self, mask: &AttentionMaskSpec) -> bool {
        self.rows == mask.rows && self.cols == mask.cols
    }
}

/// Classifies every `tile × tile` block of `mask`.
pub fn tile_sparsity(mask: &AttentionMaskSpec, tile: usize) -> Result<BlockSparsityIndex> {
    if tile == 0 {
        return Err(Bd3Error::config("tile size must be positive"));
    }
    let q_tiles = mask.rows.div_ceil(tile);
    let k_tiles = mask.cols.div_ceil(tile);
    let mut states = Vec::with_capacity(q_tiles * k_tiles);
    for qt in 0..q_tiles {
        for kt in 0..k_tiles {
            let (mut any, mut all) = (false, true);
            'outer: for i in qt * tile..((qt + 1) * tile).min(mask.rows) {
                for j in kt * tile..((kt + 1) * tile).min(mask.cols) {
                    if mask.allowed(i, j) {
                        any = true;
                    } else {
                        all = false;
                    }
                    if any && !all {
                        break 'outer;
                    }
                }
            }
            states.push(match (any, all) {
                (_, true) => TileState::AllAllowed,
                (false, _) => TileState::AllDenied,
                _ => TileState::Partial,
            });
        }
    }
    let mut runs = Vec::with_capacity(q_tiles);
    for qt in 0..q_tiles {
        let mut row_runs: Vec<KeyRun> = Vec::new();
        for kt in 0..k_tiles {
            let state = states[qt * k_tiles + kt];
            if state == TileState::AllDenied {
                continue;
            }
            let partial = state == TileState::Partial;
            let start = kt * tile;
            let end = ((kt + 1) * tile).min(mask.cols);
            match row_runs.last_mut() {
                Some(r) if r.end == start && r.partial == partial => r.end = end,
                _ => row_runs.push(KeyRun { start, end, partial }),
            }
        }
        runs.push(row_runs);
    }
    Ok(BlockSparsityIndex {
        tile,
        rows: mask.rows,
        cols: mask.cols,
        q_tiles,
        k_tiles,
        states,
        runs,
    })
}

/// Tile index with the default granularity (the block size, or the full width
/// for masks without block structure).
pub fn default_tiles(mask: &AttentionMaskSpec) -> Result<Arc<BlockSparsityIndex>> {
    let tile = match mask.kind {
        MaskKind::AllAllowed => mask.rows.max(mask.cols).max(1),
        _ => mask.block_size.max(1),
    };
    tile_sparsity(mask, tile).map(Arc::new)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_causal_small_case() {
        let m = AttentionMaskSpec::block_causal(4, 2).unwrap().to_dense();
        assert_eq!(m[0], [true, true, false, false]);
        assert_eq!(m[1], [true, true, false, false]);
        assert_eq!(m[2], [true; 4]);
        assert_eq!(m[3], [true; 4]);
    }

    #[test]
    fn block_causal_limits() {
        let ar = AttentionMaskSpec::block_causal(5, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(ar.allowed(i, j), j <= i);
            }
        }
        let full = AttentionMaskSpec::block_causal(6, 6).unwrap();
        assert!(full.to_dense().iter().flatten().all(|&b| b));
    }

    #[test]
    fn block_size_must_divide() {
        assert!(matches!(AttentionMaskSpec::block_causal(6, 4), Err(Bd3Error::Config(_))));
    }

    #[test]
    fn entry_examples() {
        // clean query attends to itself
        assert!(mask_entry(7, 7, 2, 6).unwrap());
        // noisy block 1 does not see clean block 1
        assert!(!mask_entry(2, 6 + 2, 2, 6).unwrap());
        // but sees clean block 0
        assert!(mask_entry(2, 6, 2, 6).unwrap());
        assert!(mask_entry(12, 0, 2, 6).is_err());
    }

    #[test]
    fn quadrants_match_composite() {
        for (l, b) in [(4, 1), (4, 2), (6, 2), (8, 4), (16, 16)] {
            let full = AttentionMaskSpec::full(l, b).unwrap().to_dense();
            assert_eq!(full, assemble_quadrants(l, b).unwrap(), "L={l} L'={b}");
        }
    }

    #[test]
    fn tiles_agree_with_elements() {
        let m = AttentionMaskSpec::full(12, 4).unwrap();
        for tile in [1, 3, 4, 5] {
            let idx = tile_sparsity(&m, tile).unwrap();
            for qt in 0..idx.q_tiles {
                for kt in 0..idx.k_tiles {
                    let vals: Vec<bool> = (qt * tile..((qt + 1) * tile).min(24))
                        .flat_map(|i| (kt * tile..((kt + 1) * tile).min(24)).map(move |j| (i, j)))
                        .map(|(i, j)| m.allowed(i, j))
                        .collect();
                    let expect = if vals.iter().all(|&v| v) {
                        TileState::AllAllowed
                    } else if vals.iter().all(|&v| !v) {
                        TileState::AllDenied
                    } else {
                        TileState::Partial
                    };
                    assert_eq!(idx.state(qt, kt), expect);
                }
            }
        }
    }

    #[test]
    fn lower_left_quadrant_denied() {
        let (l, b) = (16, 4);
        let idx = tile_sparsity(&AttentionMaskSpec::full(l, b).unwrap(), b).unwrap();
        let half = l / b;
        for qt in half..2 * half {
            for kt in 0..half {
                assert_eq!(idx.state(qt, kt), TileState::AllDenied);
            }
        }
    }

    #[test]
    fn denied_fraction_at_scale() {
        let idx = tile_sparsity(&AttentionMaskSpec::full(1024, 16).unwrap(), 16).unwrap();
        // 64 blocks: 64·63 (BD off-diagonal) + 64·65/2 (OBC upper incl. diagonal)
        // + 64·64 (lower-left) + 64·63/2 (BC upper) denied out of 128²
        let denied = 64 * 63 + 64 * 65 / 2 + 64 * 64 + 64 * 63 / 2;
        assert_eq!(idx.count(TileState::AllDenied), denied);
        assert!(idx.denied_fraction() >= 0.45);
    }

    #[test]
    fn all_allowed_tiles() {
        let m = AttentionMaskSpec::all_allowed(8, 8);
        let idx = tile_sparsity(&m, 2).unwrap();
        assert_eq!(idx.count(TileState::AllAllowed), 16);
    }
}
