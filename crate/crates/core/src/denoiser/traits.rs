use super::{Bd3Model, KvCache};
use crate::error::Result;
use crate::tensor::Tensor;

/// Value-level denoiser used by likelihood estimators.
pub trait DenoisingModel {
    /// Including the mask id, which is last.
    fn vocab_size(&self) -> usize;

    fn mask_id(&self) -> usize {
        self.vocab_size() - 1
    }

    /// log p(x^ℓ | x_t^b, x^{<b}) for every position ℓ (block b containing ℓ),
    /// as a `[L, V]` tensor obeying the SUBS constraints.
    fn block_log_probs(&self, clean: &[usize], noisy: &[usize], block_size: usize) -> Result<Tensor>;
}

/// Incremental interface used by the block samplers.
pub trait BlockDenoiser {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn block_size(&self) -> usize;

    /// Longest context (committed plus current block) the model can position.
    fn max_context(&self) -> Option<usize>;

    /// Conditioning state for `committed` built from scratch.
    fn prefix_state(&self, committed: &[usize]) -> Result<Self::State>;

    fn state_len(&self, state: &Self::State) -> usize;

    /// Clean-token distributions, one row of `V` probabilities per block position.
    fn denoise(&self, state: &Self::State, noisy: &[usize]) -> Result<Vec<Vec<f64>>>;

    /// Extends `state` with a committed clean block.
    fn commit(&self, state: &mut Self::State, block: &[usize]) -> Result<()>;
}

impl DenoisingModel for Bd3Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn block_log_probs(&self, clean: &[usize], noisy: &[usize], block_size: usize) -> Result<Tensor> {
        self.vectorized_forward(clean, noisy, block_size)
    }
}

impl BlockDenoiser for Bd3Model {
    type State = KvCache;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.config.max_len)
    }

    fn prefix_state(&self, committed: &[usize]) -> Result<KvCache> {
        self.forward_prefix(committed, self.config.block_size)
    }

    fn state_len(&self, state: &KvCache) -> usize {
        state.len()
    }

    fn denoise(&self, state: &KvCache, noisy: &[usize]) -> Result<Vec<Vec<f64>>> {
        let lp = self.denoise_block(noisy, state)?;
        Ok((0..noisy.len()).map(|r| lp.row(r).iter().map(|x| x.exp()).collect()).collect())
    }

    fn commit(&self, state: &mut KvCache, block: &[usize]) -> Result<()> {
        self.commit_block(block, state)
    }
}
