//! Benchmark fixtures shared by the criterion targets.

use std::sync::Arc;

use bd3lm::masks::{default_tiles, AttentionMaskSpec, AttnDims, BlockSparsityIndex};
use bd3lm::{Result, SplitRng};

pub use bd3lm::perf::bench_model;

/// Random q, k, v over the 2L×2L training mask.
pub struct AttentionFixture {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub dims: AttnDims,
    pub mask: AttentionMaskSpec,
    pub tiles: Arc<BlockSparsityIndex>,
}

impl AttentionFixture {
    pub fn new(len: usize, block_size: usize, d: usize, heads: usize, seed: u64) -> Result<Self> {
        let mask = AttentionMaskSpec::full(len, block_size)?;
        let tiles = default_tiles(&mask)?;
        let n = 2 * len;
        let mut rng = SplitRng::new(seed);
        let mut rand = || -> Vec<f64> { (0..n * d).map(|_| rng.normal()).collect() };
        let (q, k, v) = (rand(), rand(), rand());
        Ok(Self {
            q,
            k,
            v,
            dims: AttnDims {
                batch: 1,
                nq: n,
                nk: n,
                d,
                heads,
            },
            mask,
            tiles,
        })
    }
}

/// `batch` random training sequences over the model's symbols.
pub fn random_batch(len: usize, symbols: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SplitRng::new(seed);
    (0..batch).map(|_| (0..len).map(|_| rng.below(symbols)).collect()).collect()
}
