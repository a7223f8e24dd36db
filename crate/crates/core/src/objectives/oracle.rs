//! Exact denoiser for a first-order Markov source.

use crate::data::MarkovSource;
use crate::denoiser::{check_block_size, BlockDenoiser, DenoisingModel};
use crate::error::{Bd3Error, Result};
use crate::tensor::Tensor;

/// Posterior marginals p(x^ℓ | visible tokens of block b, x^{<b}) by
/// forward-backward within each block.
#[derive(Debug, Clone)]
pub struct MarkovOracle {
    source: MarkovSource,
    block_size: usize,
}

impl MarkovOracle {
    pub fn new(source: MarkovSource, block_size: usize) -> Result<Self> {
        if source.order() != 1 {
            return Err(Bd3Error::Contract("the oracle denoiser supports first-order sources".into()));
        }
        if block_size == 0 {
            return Err(Bd3Error::config("block size must be positive"));
        }
        Ok(Self { source, block_size })
    }

    pub fn source(&self) -> &MarkovSource {
        &self.source
    }

    fn symbols(&self) -> usize {
        self.source.symbols()
    }

    /// Next-token log-probabilities `[L, V]` under the source.
    pub fn ar_log_probs(&self, x: &[usize]) -> Tensor {
        let s = self.symbols();
        let v = s + 1;
        let mut out = vec![f64::NEG_INFINITY; x.len() * v];
        for l in 0..x.len() {
            let p = if l == 0 {
                self.source.stationary()
            } else {
                self.source.next_probs(&x[..l])
            };
            for (c, &q) in p.iter().enumerate() {
                out[l * v + c] = q.ln();
            }
        }
        Tensor::new(vec![x.len(), v], out).expect("layout")
    }

    /// Marginal probabilities over symbols for each position of `noisy`.
    fn marginals(&self, prev: Option<usize>, noisy: &[usize]) -> Vec<Vec<f64>> {
        let s = self.symbols();
        let mask = s;
        let t = self.source.transitions();
        let n = noisy.len();
        let allow = |i: usize, c: usize| noisy[i] == mask || noisy[i] == c;
        let mut fwd = vec![vec![0.0; s]; n];
        for c in 0..s {
            let init = match prev {
                Some(p) => t[p * s + c],
                None => self.source.stationary()[c],
            };
            fwd[0][c] = if allow(0, c) { init } else { 0.0 };
        }
        normalize(&mut fwd[0]);
        for i in 1..n {
            for c in 0..s {
                if allow(i, c) {
                    fwd[i][c] = (0..s).map(|r| fwd[i - 1][r] * t[r * s + c]).sum();
                }
            }
            normalize(&mut fwd[i]);
        }
        let mut bwd = vec![1.0; s];
        let mut out = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let mut m: Vec<f64> = (0..s).map(|c| fwd[i][c] * bwd[c]).collect();
            normalize(&mut m);
            out[i] = m;
            if i > 0 {
                let mut next = vec![0.0; s];
                for (r, nr) in next.iter_mut().enumerate() {
                    *nr = (0..s).filter(|&c| allow(i, c)).map(|c| t[r * s + c] * bwd[c]).sum();
                }
                normalize(&mut next);
                bwd = next;
            }
        }
        out
    }

    fn check_noisy(&self, noisy: &[usize]) -> Result<()> {
        match noisy.iter().find(|&&tok| tok > self.symbols()) {
            Some(tok) => Err(Bd3Error::Vocabulary(format!("id {tok} outside vocabulary"))),
            None => Ok(()),
        }
    }
}

fn normalize(p: &mut [f64]) {
    let z: f64 = p.iter().sum();
    if z > 0.0 {
        p.iter_mut().for_each(|x| *x /= z);
    }
}

impl DenoisingModel for MarkovOracle {
    fn vocab_size(&self) -> usize {
        self.symbols() + 1
    }

    fn block_log_probs(&self, clean: &[usize], noisy: &[usize], block_size: usize) -> Result<Tensor> {
        if clean.len() != noisy.len() {
            return Err(Bd3Error::dim("clean/noisy lengths disagree"));
        }
        check_block_size(clean.len(), block_size)?;
        crate::data::check_clean(clean, self.symbols() + 1)?;
        self.check_noisy(noisy)?;
        let v = self.symbols() + 1;
        let mask = self.symbols();
        let mut out = vec![f64::NEG_INFINITY; clean.len() * v];
        for b in 0..clean.len() / block_size {
            let r = b * block_size..(b + 1) * block_size;
            let prev = (b > 0).then(|| clean[r.start - 1]);
            let m = self.marginals(prev, &noisy[r.clone()]);
            for (i, l) in r.enumerate() {
                let row = &mut out[l * v..(l + 1) * v];
                if noisy[l] != mask {
                    row[noisy[l]] = 0.0;
                } else {
                    for (o, &p) in row.iter_mut().zip(&m[i]) {
                        *o = p.ln();
                    }
                }
            }
        }
        Tensor::new(vec![clean.len(), v], out)
    }
}

impl BlockDenoiser for MarkovOracle {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.symbols() + 1
    }

    fn block_size(&self) -> usize {
        self.block_size
    }

    fn max_context(&self) -> Option<usize> {
        None
    }

    fn prefix_state(&self, committed: &[usize]) -> Result<Vec<usize>> {
        crate::data::check_clean(committed, self.symbols() + 1)?;
        Ok(committed.to_vec())
    }

    fn state_len(&self, state: &Vec<usize>) -> usize {
        state.len()
    }

    fn denoise(&self, state: &Vec<usize>, noisy: &[usize]) -> Result<Vec<Vec<f64>>> {
        if noisy.len() != self.block_size {
            return Err(Bd3Error::CacheAlignment(format!(
                "block of {} for block size {}",
                noisy.len(),
                self.block_size
            )));
        }
        self.check_noisy(noisy)?;
        let mask = self.symbols();
        let m = self.marginals(state.last().copied(), noisy);
        Ok(noisy
            .iter()
            .zip(m)
            .map(|(&tok, mut p)| {
                if tok != mask {
                    p = vec![0.0; mask];
                    p[tok] = 1.0;
                }
                p.push(0.0);
                p
            })
            .collect())
    }

    fn commit(&self, state: &mut Vec<usize>, block: &[usize]) -> Result<()> {
        crate::data::check_clean(block, self.symbols() + 1)?;
        state.extend_from_slice(block);
        Ok(())
    }
}
