//! Append-only computation tape with reverse-mode differentiation.
//!
//! A `Graph` borrows a `ParamStore` immutably for the duration of one forward
//! pass; parameter leaves read their values straight from the store. Gradients
//! come back as a detached `Gradients` value so the caller can accumulate them
//! into the store once the graph is dropped.

use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Bd3Error, Result};
use crate::masks::attention::{attention_backward, attention_forward, AttnDims};
use crate::masks::{AttentionMaskSpec, BlockSparsityIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Sum {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Softmax {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    FillColumn {
        a: usize,
        col: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        mask: AttentionMaskSpec,
        tiles: Arc<BlockSparsityIndex>,
        lse: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SelectRows {
        a: usize,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, idx: usize) -> &[f64] {
        let node = &self.nodes[idx];
        match node.op {
            Op::Param(id) => self.store.expect("parameter node without a store").value(id).data(),
            _ => &node.value,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Bd3Error::dim(format!("expected matrix, got {s:?}"))),
        }
    }

    /// A constant (non-parameter) leaf; its gradient is still tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("graph built without a parameter store");
        let shape = store.value(id).shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Bd3Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.val(a.0), self.val(b.0), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Bd3Error::dim(format!("add shapes {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.val(a.0).iter().zip(self.val(b.0)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }))
    }

    /// `a[m,n] + bias[n]` broadcast over the leading dimension.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.shape(bias) != [n] {
            return Err(Bd3Error::dim(format!(
                "bias shape {:?} does not match {n} columns",
                self.shape(bias)
            )));
        }
        let bv = self.val(bias.0);
        let mut out = self.val(a.0).to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(vec![m, n], out, Op::AddRow { a: a.0, bias: bias.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Bd3Error::dim(format!("mul shapes {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.val(a.0).iter().zip(self.val(b.0)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.val(a.0).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a: a.0, c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a.0).iter().sum();
        self.push(vec![], vec![s], Op::Sum { a: a.0 })
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .val(a.0)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.val(a.0).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu { a: a.0 })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Bd3Error::dim("layer_norm affine parameters must have shape [cols]"));
        }
        let xv = self.val(x.0);
        let g = self.val(gamma.0);
        let b = self.val(beta.0);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Bd3Error::Vocabulary(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let tv = self.val(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let mut out = self.val(a.0).to_vec();
        if out.iter().any(|v| v.is_nan()) {
            return Err(Bd3Error::NotANumber("softmax input"));
        }
        for row in out.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        Ok(self.push(shape, out, Op::Softmax { a: a.0 }))
    }

    /// Σ_ℓ w_ℓ · (−log softmax(logits_ℓ)[target_ℓ]); rows with zero weight are skipped.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, v) = self.dims2(logits)?;
        if targets.len() != m || weights.len() != m {
            return Err(Bd3Error::dim(format!(
                "cross entropy: {m} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Bd3Error::Vocabulary(format!("target id {bad} out of range for {v} classes")));
        }
        if weights.iter().any(|&w| w < 0.0 || w.is_nan()) {
            return Err(Bd3Error::Contract("cross entropy weights must be nonnegative".into()));
        }
        let lv = self.val(logits.0);
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::logsumexp(row);
            let p = &mut probs[i * v..(i + 1) * v];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - lse).exp();
            }
            total += weights[i] * (lse - row[targets[i]]);
        }
        Ok(self.push(
            vec![],
            vec![total],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Overwrites column `col` of a matrix with `fill`; that column receives no gradient.
    pub fn fill_column(&mut self, a: Var, col: usize, fill: f64) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if col >= n {
            return Err(Bd3Error::dim(format!("column {col} out of range for {n}")));
        }
        let mut out = self.val(a.0).to_vec();
        for i in 0..m {
            out[i * n + col] = fill;
        }
        Ok(self.push(vec![m, n], out, Op::FillColumn { a: a.0, col }))
    }

    /// Multi-head attention of `q` over `k`/`v` under `mask`, with `batch`
    /// independent sequences stacked along rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: &AttentionMaskSpec,
        tiles: Arc<BlockSparsityIndex>,
    ) -> Result<Var> {
        let (rq, d) = self.dims2(q)?;
        let (rk, dk) = self.dims2(k)?;
        if self.shape(v) != [rk, dk] || dk != d {
            return Err(Bd3Error::dim("attention q/k/v widths disagree"));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Bd3Error::dim("attention rows not divisible by batch"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Bd3Error::dim(format!("{d} columns not divisible by {heads} heads")));
        }
        let dims = AttnDims {
            batch,
            nq: rq / batch,
            nk: rk / batch,
            d,
            heads,
        };
        let (out, lse) = attention_forward(self.val(q.0), self.val(k.0), self.val(v.0), dims, mask, &tiles)?;
        Ok(self.push(
            vec![rq, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                dims,
                mask: mask.clone(),
                tiles,
                lse,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Bd3Error::dim("concat of zero tensors"));
        };
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p)?;
            if c != n {
                return Err(Bd3Error::dim("concat column mismatch"));
            }
            rows += m;
            out.extend_from_slice(self.val(p.0));
        }
        Ok(self.push(
            vec![rows, n],
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Gathers the listed rows (repetition allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Bd3Error::dim(format!("row {bad} out of range for {m}")));
        }
        let av = self.val(a.0);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::SelectRows {
                a: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(a, &rows)
    }

    /// Backpropagates from a scalar `loss`; returns gradients of every
    /// parameter leaf. Leaf-node gradients are available via [`Backward::leaf_grad`].
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.nodes[loss.0].value.len() != 1 || !self.nodes[loss.0].shape.is_empty() {
            return Err(Bd3Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let num_params = self.store.map_or(0, ParamStore::len);
        let mut params = Gradients::empty(num_params);
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[idx] {
                    match &mut params.by_param[id.0] {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Ok(Backward { params, nodes: grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, self.val(b), &mut da, m, n, k);
                accumulate(grads, a, &da);
                let mut db = vec![0.0; k * n];
                gemm_tn(self.val(a), g, &mut db, m, k, n);
                accumulate(grads, b, &db);
            }
            &Op::Add { a, b } => {
                accumulate(grads, a, g);
                accumulate(grads, b, g);
            }
            &Op::AddRow { a, bias } => {
                accumulate(grads, a, g);
                let n = node.shape[1];
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                accumulate(grads, bias, &db);
            }
            &Op::Mul { a, b } => {
                let av = self.val(a);
                let bv = self.val(b);
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            &Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(grads, a, &da);
            }
            &Op::Sum { a } => {
                let n = self.nodes[a].shape.iter().product();
                accumulate(grads, a, &vec![g[0]; n]);
            }
            &Op::Gelu { a } => {
                let da: Vec<f64> = self
                    .val(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, a, &da);
            }
            &Op::Relu { a } => {
                let da: Vec<f64> = self.val(a).iter().zip(g).map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 }).collect();
                accumulate(grads, a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let gv = self.val(*gamma);
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let gy = &g[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        let dxh = gy[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dgamma[j] += gy[j] * xh[j];
                        dbeta[j] += gy[j];
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    for j in 0..n {
                        let dxh = gy[j] * gv[j];
                        dx[i * n + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let tshape = &self.nodes[*table].shape;
                let d = tshape[1];
                let mut dt = vec![0.0; tshape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                accumulate(grads, *table, &dt);
            }
            &Op::Softmax { a } => {
                let c = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let mut da = vec![0.0; y.len()];
                for ((dy, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dy[j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.nodes[*logits].shape[1];
                let mut dl = vec![0.0; probs.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w * g[0];
                    let row = &mut dl[i * v..(i + 1) * v];
                    for (d, p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                        *d = scale * p;
                    }
                    row[t] -= scale;
                }
                accumulate(grads, *logits, &dl);
            }
            &Op::FillColumn { a, col } => {
                let n = node.shape[1];
                let mut da = g.to_vec();
                for row in da.chunks_mut(n) {
                    row[col] = 0.0;
                }
                accumulate(grads, a, &da);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                mask,
                tiles,
                lse,
            } => {
                let mut dq = vec![0.0; self.val(*q).len()];
                let mut dk = vec![0.0; self.val(*k).len()];
                let mut dv = vec![0.0; self.val(*v).len()];
                attention_backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    &node.value,
                    lse,
                    g,
                    *dims,
                    mask,
                    tiles,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SelectRows { a, rows } => {
                let n = node.shape[1];
                let mut da = vec![0.0; self.val(*a).len()];
                for (i, &r) in rows.iter().enumerate() {
                    kernels::axpy(1.0, &g[i * n..(i + 1) * n], &mut da[r * n..(r + 1) * n]);
                }
                accumulate(grads, *a, &da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Backward {
    pub params: Gradients,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Gradient w.r.t. any node (typically a leaf created with [`Graph::leaf`]).
    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use crate::tensor::gradcheck::primitive_suite;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = SplitRng::new(11);
        for _ in 0..3 {
            for (name, err) in primitive_suite(&mut rng).unwrap() {
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let mut g = Graph::with_params(&store);
        let v = g.param(p);
        let loss = g.sum(v);
        let grads = g.backward(loss).unwrap().params;
        assert_eq!(grads.get(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_square_norm_gives_identity() {
        let mut store = ParamStore::new();
        let data = vec![1.0, -2.0, 3.0];
        let p = store.add("p", Tensor::new(vec![3], data.clone()).unwrap());
        let mut g = Graph::with_params(&store);
        let v = g.param(p);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap().params;
        assert_eq!(grads.get(p).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_accumulates_and_is_linear() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let grads_of = |store: &ParamStore, which: u8| {
            let mut g = Graph::with_params(store);
            let v = g.param(p);
            let a = g.gelu(v);
            let la = g.sum(a);
            let b = g.mul(v, v).unwrap();
            let lb = g.sum(b);
            let loss = match which {
                0 => la,
                1 => lb,
                _ => g.add(la, lb).unwrap(),
            };
            g.backward(loss).unwrap().params
        };
        let ga = grads_of(&store, 0);
        let gb = grads_of(&store, 1);
        let gab = grads_of(&store, 2);
        for i in 0..2 {
            let sum = ga.get(p).unwrap()[i] + gb.get(p).unwrap()[i];
            assert!((sum - gab.get(p).unwrap()[i]).abs() < 1e-14);
        }
        store.accumulate(&ga);
        store.accumulate(&gb);
        for i in 0..2 {
            assert!((store.grad(p).data()[i] - gab.get(p).unwrap()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(v), Err(Bd3Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.leaf(Tensor::zeros(vec![1, 4]));
        let ce = g.masked_cross_entropy(uniform, &[2], &[1.0]).unwrap();
        assert!((g.value(ce)[0] - 4f64.ln()).abs() < 1e-15);

        let confident = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap());
        let ce = g.masked_cross_entropy(confident, &[1], &[1.0]).unwrap();
        assert!(g.value(ce)[0] < 1e-40);

        let logits = g.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]).unwrap());
        let ce = g.masked_cross_entropy(logits, &[0, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(ce)[0], 0.0);
        let back = g.backward(ce).unwrap();
        assert!(back.leaf_grad(logits).unwrap().iter().all(|&x| x == 0.0));

        assert!(matches!(
            g.masked_cross_entropy(logits, &[0, 3], &[1.0, 1.0]),
            Err(Bd3Error::Vocabulary(_))
        ));
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = SplitRng::new(2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![50, 7], (0..350).map(|_| 30.0 * rng.normal()).collect()).unwrap());
        let s = g.softmax_lastdim(x).unwrap();
        for row in g.value(s).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
