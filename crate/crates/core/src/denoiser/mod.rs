//! Pre-norm transformer denoiser with SUBS output constraints.
//!
//! The network has no time conditioning. Block structure enters only through
//! attention masks, so one set of weights can be evaluated at any block size
//! dividing the context.

mod cache;
mod traits;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use cache::KvCache;
pub use traits::{BlockDenoiser, DenoisingModel};

use crate::error::{Bd3Error, Result};
use crate::masks::{default_tiles, AttentionMaskSpec, BlockSparsityIndex, MaskKind};
use crate::rng::SplitRng;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

/// Logit written into the mask column before the softmax.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Includes the mask id (last).
    pub vocab_size: usize,
    pub max_len: usize,
    pub block_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 6,
            max_len: 64,
            block_size: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Bd3Error::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Bd3Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Bd3Error::config("vocabulary needs at least one symbol plus the mask"));
        }
        check_block_size(self.max_len, self.block_size)
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_size - 1
    }
}

pub fn check_block_size(len: usize, block_size: usize) -> Result<()> {
    if block_size == 0 || !len.is_multiple_of(block_size) {
        return Err(Bd3Error::config(format!(
            "block size {block_size} must be positive and divide length {len}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

type MaskKey = (u8, usize, usize, usize);

/// Key/value activations of one layer as graph nodes, `batch` sequences of
/// `stride` rows each.
#[derive(Debug, Clone, Copy)]
pub struct LayerKv {
    pub k: Var,
    pub v: Var,
}

/// A prefix of cached keys/values to attend to: the first `rows` of every
/// `stride`-row sequence segment.
#[derive(Debug, Clone, Copy)]
pub struct PrefixRef<'a> {
    pub kv: &'a [LayerKv],
    pub stride: usize,
    pub rows: usize,
}

#[derive(Debug)]
pub struct Bd3Model {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    ids: ModelIds,
    masks: Mutex<HashMap<MaskKey, (AttentionMaskSpec, Arc<BlockSparsityIndex>)>>,
}

impl Clone for Bd3Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            ids: self.ids.clone(),
            masks: Mutex::new(self.masks.lock().expect("mask memo poisoned").clone()),
        }
    }
}

fn random_tensor(shape: Vec<usize>, std: f64, rng: &mut SplitRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

impl Bd3Model {
    pub fn new(config: DenoiserConfig, rng: &mut SplitRng) -> Result<Self> {
        config.validate()?;
        let DenoiserConfig {
            layers,
            d_model: d,
            d_ff,
            vocab_size: v,
            max_len,
            ..
        } = config;
        let mut p = ParamStore::new();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let tok = p.add("tok_emb", random_tensor(vec![v, d], 0.5, rng));
        let pos = p.add("pos_emb", random_tensor(vec![max_len, d], 0.5, rng));
        let mut layer_ids = Vec::with_capacity(layers);
        for l in 0..layers {
            let name = |s: &str| format!("layer{l}.{s}");
            layer_ids.push(LayerIds {
                ln1_g: p.add(name("ln1.g"), Tensor::new(vec![d], vec![1.0; d])?),
                ln1_b: p.add(name("ln1.b"), Tensor::zeros(vec![d])),
                wq: p.add(name("wq"), random_tensor(vec![d, d], inv(d), rng)),
                wk: p.add(name("wk"), random_tensor(vec![d, d], inv(d), rng)),
                wv: p.add(name("wv"), random_tensor(vec![d, d], inv(d), rng)),
                wo: p.add(name("wo"), random_tensor(vec![d, d], inv(d), rng)),
                bo: p.add(name("bo"), Tensor::zeros(vec![d])),
                ln2_g: p.add(name("ln2.g"), Tensor::new(vec![d], vec![1.0; d])?),
                ln2_b: p.add(name("ln2.b"), Tensor::zeros(vec![d])),
                w1: p.add(name("w1"), random_tensor(vec![d, d_ff], inv(d), rng)),
                b1: p.add(name("b1"), Tensor::zeros(vec![d_ff])),
                w2: p.add(name("w2"), random_tensor(vec![d_ff, d], inv(d_ff), rng)),
                b2: p.add(name("b2"), Tensor::zeros(vec![d])),
            });
        }
        let lnf_g = p.add("lnf.g", Tensor::new(vec![d], vec![1.0; d])?);
        let lnf_b = p.add("lnf.b", Tensor::zeros(vec![d]));
        let w_out = p.add("w_out", random_tensor(vec![d, v], inv(d), rng));
        let b_out = p.add("b_out", Tensor::zeros(vec![v]));
        Ok(Self {
            config,
            params: p,
            ids: ModelIds {
                tok,
                pos,
                layers: layer_ids,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
            },
            masks: Mutex::new(HashMap::new()),
        })
    }

    pub fn mask_id(&self) -> usize {
        self.config.mask_id()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Mask spec and tile index, memoized per shape.
    pub fn mask(
        &self,
        kind: MaskKind,
        rows: usize,
        cols: usize,
        block_size: usize,
    ) -> Result<(AttentionMaskSpec, Arc<BlockSparsityIndex>)> {
        let tag = match kind {
            MaskKind::BlockCausal => 0,
            MaskKind::Full => 1,
            MaskKind::AllAllowed => 2,
            _ => return Err(Bd3Error::Contract("model masks are block-causal, full or all-allowed".into())),
        };
        let key = (tag, rows, cols, block_size);
        let mut memo = self.masks.lock().expect("mask memo poisoned");
        if let Some(hit) = memo.get(&key) {
            return Ok(hit.clone());
        }
        let spec = match tag {
            0 => AttentionMaskSpec::block_causal(rows, block_size)?,
            1 if rows == cols => AttentionMaskSpec::full(rows / 2, block_size)?,
            1 => AttentionMaskSpec::full_noisy_rows(rows, block_size)?,
            _ => AttentionMaskSpec::all_allowed(rows, cols),
        };
        let tiles = default_tiles(&spec)?;
        memo.insert(key, (spec.clone(), tiles.clone()));
        Ok((spec, tiles))
    }

    fn embed(&self, g: &mut Graph<'_>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(Bd3Error::CacheAlignment(format!(
                "position {p} beyond the model context {}",
                self.config.max_len
            )));
        }
        let tok = g.param(self.ids.tok);
        let pos = g.param(self.ids.pos);
        let t = g.embedding(tok, ids)?;
        let p = g.embedding(pos, positions)?;
        g.add(t, p)
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = g.param(w);
        let y = g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = g.param(b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gv = g.param(gamma);
        let bv = g.param(beta);
        g.layer_norm(x, gv, bv, 1e-5)
    }

    fn qkv(&self, g: &mut Graph<'_>, l: usize, x: Var) -> Result<(Var, LayerKv)> {
        let ids = &self.ids.layers[l];
        let h = self.norm(g, x, ids.ln1_g, ids.ln1_b)?;
        let q = self.linear(g, h, ids.wq, None)?;
        let k = self.linear(g, h, ids.wk, None)?;
        let v = self.linear(g, h, ids.wv, None)?;
        Ok((q, LayerKv { k, v }))
    }

    fn finish_layer(&self, g: &mut Graph<'_>, l: usize, x: Var, attn: Var) -> Result<Var> {
        let ids = &self.ids.layers[l];
        let a = self.linear(g, attn, ids.wo, Some(ids.bo))?;
        let x1 = g.add(x, a)?;
        let h = self.norm(g, x1, ids.ln2_g, ids.ln2_b)?;
        let f = self.linear(g, h, ids.w1, Some(ids.b1))?;
        let f = g.gelu(f);
        let m = self.linear(g, f, ids.w2, Some(ids.b2))?;
        g.add(x1, m)
    }

    /// Logits with the mask column pinned to [`MASK_LOGIT`].
    fn head(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.norm(g, x, self.ids.lnf_g, self.ids.lnf_b)?;
        let logits = self.linear(g, h, self.ids.w_out, Some(self.ids.b_out))?;
        g.fill_column(logits, self.mask_id(), MASK_LOGIT)
    }

    /// Block-causal pass over `batch` clean sequences stacked in `clean`;
    /// returns per-layer keys/values. Logits are never formed.
    pub fn graph_prefix(&self, g: &mut Graph<'_>, clean: &[usize], batch: usize, block_size: usize) -> Result<Vec<LayerKv>> {
        if batch == 0 || !clean.len().is_multiple_of(batch) {
            return Err(Bd3Error::dim("clean rows not divisible by batch"));
        }
        let n = clean.len() / batch;
        check_block_size(n, block_size)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let (mask, tiles) = self.mask(MaskKind::BlockCausal, n, n, block_size)?;
        let mut x = self.embed(g, clean, &positions)?;
        let mut kvs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (q, kv) = self.qkv(g, l, x)?;
            kvs.push(kv);
            if l + 1 == self.config.layers {
                break;
            }
            let o = g.attention(q, kv.k, kv.v, self.config.heads, batch, &mask, tiles.clone())?;
            x = self.finish_layer(g, l, x, o)?;
        }
        Ok(kvs)
    }

    /// Runs one block (`batch` stacked rows of `ids` starting at position
    /// `start`) attending to itself and an optional prefix. With `own_first`
    /// the keys are ordered `[own, prefix]`, otherwise `[prefix, own]`.
    /// Returns the final hidden states and this block's keys/values.
    pub fn graph_block(
        &self,
        g: &mut Graph<'_>,
        ids: &[usize],
        start: usize,
        prefix: Option<PrefixRef<'_>>,
        batch: usize,
        own_first: bool,
        need_hidden: bool,
    ) -> Result<(Option<Var>, Vec<LayerKv>)> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Bd3Error::dim("block rows not divisible by batch"));
        }
        let nb = ids.len() / batch;
        let positions: Vec<usize> = (0..batch).flat_map(|_| start..start + nb).collect();
        let pre_rows = prefix.map_or(0, |p| p.rows);
        let (mask, tiles) = self.mask(MaskKind::AllAllowed, nb, nb + pre_rows, 1)?;
        let gather: Vec<usize> = match prefix {
            Some(p) if p.rows > 0 => {
                let own_total = batch * nb;
                let mut idx = Vec::with_capacity(batch * (nb + p.rows));
                for s in 0..batch {
                    let own = s * nb..(s + 1) * nb;
                    let pre = (own_total + s * p.stride)..(own_total + s * p.stride + p.rows);
                    if own_first {
                        idx.extend(own);
                        idx.extend(pre);
                    } else {
                        idx.extend(pre);
                        idx.extend(own);
                    }
                }
                idx
            }
            _ => Vec::new(),
        };
        let mut x = self.embed(g, ids, &positions)?;
        let mut kvs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (q, kv) = self.qkv(g, l, x)?;
            kvs.push(kv);
            if !need_hidden && l + 1 == self.config.layers {
                return Ok((None, kvs));
            }
            let (k, v) = match prefix {
                Some(p) if p.rows > 0 => {
                    let kc = g.concat_rows(&[kv.k, p.kv[l].k])?;
                    let vc = g.concat_rows(&[kv.v, p.kv[l].v])?;
                    (g.select_rows(kc, &gather)?, g.select_rows(vc, &gather)?)
                }
                _ => (kv.k, kv.v),
            };
            let o = g.attention(q, k, v, self.config.heads, batch, &mask, tiles.clone())?;
            x = self.finish_layer(g, l, x, o)?;
        }
        Ok((Some(x), kvs))
    }

    /// Logits for a denoised block from final hidden states.
    pub fn graph_logits(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        self.head(g, hidden)
    }

    /// One pass over `noisy ⊕ clean` per sequence under the composite mask;
    /// returns logits for the noisy rows, `[batch·L, V]`.
    pub fn graph_vectorized(&self, g: &mut Graph<'_>, clean: &[usize], noisy: &[usize], batch: usize, block_size: usize) -> Result<Var> {
        if clean.len() != noisy.len() || batch == 0 || !clean.len().is_multiple_of(batch) {
            return Err(Bd3Error::dim("clean/noisy lengths disagree"));
        }
        let n = clean.len() / batch;
        check_block_size(n, block_size)?;
        let mut ids = Vec::with_capacity(2 * clean.len());
        let mut positions = Vec::with_capacity(2 * clean.len());
        for s in 0..batch {
            ids.extend_from_slice(&noisy[s * n..(s + 1) * n]);
            ids.extend_from_slice(&clean[s * n..(s + 1) * n]);
            positions.extend(0..n);
            positions.extend(0..n);
        }
        let (mask, tiles) = self.mask(MaskKind::Full, 2 * n, 2 * n, block_size)?;
        let noisy_rows: Vec<usize> = (0..batch).flat_map(|s| s * 2 * n..s * 2 * n + n).collect();
        let mut x = self.embed(g, &ids, &positions)?;
        let last = self.config.layers - 1;
        for l in 0..last {
            let (q, kv) = self.qkv(g, l, x)?;
            let o = g.attention(q, kv.k, kv.v, self.config.heads, batch, &mask, tiles.clone())?;
            x = self.finish_layer(g, l, x, o)?;
        }
        // the clean stream's final-layer outputs are never read
        let (q, kv) = self.qkv(g, last, x)?;
        let q = g.select_rows(q, &noisy_rows)?;
        let x = g.select_rows(x, &noisy_rows)?;
        let (mask, tiles) = self.mask(MaskKind::Full, n, 2 * n, block_size)?;
        let o = g.attention(q, kv.k, kv.v, self.config.heads, batch, &mask, tiles)?;
        let h = self.finish_layer(g, last, x, o)?;
        self.head(g, h)
    }

    /// Value-level vectorized forward; returns SUBS log-probabilities `[L, V]`.
    pub fn vectorized_forward(&self, clean: &[usize], noisy: &[usize], block_size: usize) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let logits = self.graph_vectorized(&mut g, clean, noisy, 1, block_size)?;
        Ok(subs_log_probs(g.value(logits), noisy, self.config.vocab_size))
    }

    /// Per-layer keys/values of a clean prefix under the block-causal mask.
    pub fn forward_prefix(&self, clean: &[usize], block_size: usize) -> Result<KvCache> {
        check_block_size(clean.len(), block_size)?;
        let mut cache = KvCache::new(self.config.layers, self.config.d_model, block_size);
        if clean.is_empty() {
            return Ok(cache);
        }
        let mut g = Graph::with_params(&self.params);
        let kvs = self.graph_prefix(&mut g, clean, 1, block_size)?;
        for (l, kv) in kvs.iter().enumerate() {
            cache.append_layer(l, g.value(kv.k), g.value(kv.v));
        }
        cache.set_len(clean.len());
        Ok(cache)
    }

    fn cache_prefix<'g>(&self, g: &mut Graph<'g>, cache: &KvCache) -> Result<Vec<LayerKv>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (k, v) = cache.layer(l);
            let k = g.leaf(Tensor::new(vec![cache.len(), d], k.to_vec())?);
            let v = g.leaf(Tensor::new(vec![cache.len(), d], v.to_vec())?);
            out.push(LayerKv { k, v });
        }
        Ok(out)
    }

    /// SUBS log-probabilities `[L′, V]` for a noisy block conditioned on the cached prefix.
    pub fn denoise_block(&self, noisy: &[usize], cache: &KvCache) -> Result<Tensor> {
        if noisy.len() != cache.block_size() {
            return Err(Bd3Error::CacheAlignment(format!(
                "block of {} tokens against a cache for block size {}",
                noisy.len(),
                cache.block_size()
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let prefix = self.cache_prefix(&mut g, cache)?;
        let pref = PrefixRef {
            kv: &prefix,
            stride: cache.len(),
            rows: cache.len(),
        };
        let (hidden, _) = self.graph_block(&mut g, noisy, cache.len(), (!cache.is_empty()).then_some(pref), 1, true, true)?;
        let logits = self.head(&mut g, hidden.expect("hidden requested"))?;
        Ok(subs_log_probs(g.value(logits), noisy, self.config.vocab_size))
    }

    /// Appends a committed clean block's keys/values to the cache.
    pub fn commit_block(&self, block: &[usize], cache: &mut KvCache) -> Result<()> {
        if block.len() != cache.block_size() {
            return Err(Bd3Error::CacheAlignment(format!(
                "committing {} tokens to a cache with block size {}",
                block.len(),
                cache.block_size()
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let prefix = self.cache_prefix(&mut g, cache)?;
        let pref = PrefixRef {
            kv: &prefix,
            stride: cache.len(),
            rows: cache.len(),
        };
        let (_, kvs) = self.graph_block(&mut g, block, cache.len(), (!cache.is_empty()).then_some(pref), 1, false, false)?;
        for (l, kv) in kvs.iter().enumerate() {
            cache.append_layer(l, g.value(kv.k), g.value(kv.v));
        }
        let len = cache.len() + block.len();
        cache.set_len(len);
        Ok(())
    }

    /// The block loop: prefix cache then one denoising call per block.
    pub fn looped_forward(&self, clean: &[usize], noisy: &[usize], block_size: usize) -> Result<Tensor> {
        check_block_size(clean.len(), block_size)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(clean.len() * v);
        let mut cache = KvCache::new(self.config.layers, self.config.d_model, block_size);
        for b in 0..clean.len() / block_size {
            let r = b * block_size..(b + 1) * block_size;
            out.extend_from_slice(self.denoise_block(&noisy[r.clone()], &cache)?.data());
            self.commit_block(&clean[r], &mut cache)?;
        }
        Tensor::new(vec![clean.len(), v], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_tensors())
    }

    /// Config scalars (`meta.*`) followed by every parameter.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut tensors: Vec<(String, Tensor)> = [
            ("layers", c.layers),
            ("heads", c.heads),
            ("d_model", c.d_model),
            ("d_ff", c.d_ff),
            ("vocab_size", c.vocab_size),
            ("max_len", c.max_len),
            ("block_size", c.block_size),
        ]
        .into_iter()
        .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(v as f64)))
        .collect();
        tensors.extend(self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
        tensors
    }

    /// Loads weights and metadata. Extra `meta.*` scalars pass through in the
    /// returned map.
    pub fn load(path: &Path) -> Result<(Self, HashMap<String, f64>)> {
        Self::from_tensors(read_checkpoint(path)?)
    }

    /// Rebuilds a model from checkpoint tensors; `opt.*` entries are ignored.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<(Self, HashMap<String, f64>)> {
        let mut meta = HashMap::new();
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            match name.strip_prefix("meta.") {
                Some(key) => {
                    meta.insert(key.to_string(), t.item()?);
                }
                None if name.starts_with("opt.") => {}
                None => {
                    store.add(name, t);
                }
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .map(|&v| v as usize)
                .ok_or_else(|| Bd3Error::Checkpoint(format!("missing meta.{k}")))
        };
        let config = DenoiserConfig {
            layers: get("layers")?,
            heads: get("heads")?,
            d_model: get("d_model")?,
            d_ff: get("d_ff")?,
            vocab_size: get("vocab_size")?,
            max_len: get("max_len")?,
            block_size: get("block_size")?,
        };
        let mut model = Self::new(config, &mut SplitRng::new(0))?;
        model.params.copy_values_from(&store)?;
        Ok((model, meta))
    }
}

/// Applies SUBS to raw logits: point masses at unmasked inputs, and an exact
/// softmax over non-mask ids elsewhere. The mask id gets log-probability −∞.
pub fn subs_log_probs(logits: &[f64], noisy: &[usize], vocab_size: usize) -> Tensor {
    let mask = vocab_size - 1;
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for (r, &tok) in noisy.iter().enumerate() {
        let row = &mut out[r * vocab_size..(r + 1) * vocab_size];
        if tok != mask {
            row[tok] = 0.0;
            continue;
        }
        let src = &logits[r * vocab_size..(r + 1) * vocab_size - 1];
        let lse = crate::tensor::kernels::logsumexp(src);
        for (o, &x) in row.iter_mut().zip(src) {
            *o = x - lse;
        }
    }
    Tensor::new(vec![noisy.len(), vocab_size], out).expect("square layout")
}

#[cfg(test)]
mod tests;
