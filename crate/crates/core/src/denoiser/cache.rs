/// Per-layer keys and values of committed tokens, each `[len, d]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
    d: usize,
    block_size: usize,
}

impl KvCache {
    pub fn new(layers: usize, d: usize, block_size: usize) -> Self {
        Self {
            layers: vec![(Vec::new(), Vec::new()); layers],
            len: 0,
            d,
            block_size,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (k, v) = &self.layers[l];
        (k, v)
    }

    pub(crate) fn append_layer(&mut self, l: usize, k: &[f64], v: &[f64]) {
        self.layers[l].0.extend_from_slice(k);
        self.layers[l].1.extend_from_slice(v);
    }

    pub(crate) fn set_len(&mut self, len: usize) {
        debug_assert!(self.layers.iter().all(|(k, _)| k.len() == len * self.d));
        self.len = len;
    }

    /// Keeps only the first `len` rows.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in &mut self.layers {
            k.truncate(len * self.d);
            v.truncate(len * self.d);
        }
        self.len = len;
    }

    /// Largest elementwise difference over the shared rows of two caches.
    pub fn max_abs_diff(&self, other: &KvCache) -> f64 {
        let rows = self.len.min(other.len) * self.d;
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|((ka, va), (kb, vb))| ka[..rows].iter().zip(&kb[..rows]).chain(va[..rows].iter().zip(&vb[..rows])))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
