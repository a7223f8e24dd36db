use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;

/// Finite-order Markov chain over `symbols` ids with exactly computable likelihoods.
///
/// The chain state is the last `order` symbols, encoded base-`symbols` with
/// the oldest symbol most significant. Sequences start from the stationary
/// distribution over states.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    order: usize,
    symbols: usize,
    /// `symbols^order` rows of `symbols` probabilities.
    transitions: Vec<f64>,
    stationary: Vec<f64>,
}

impl MarkovSource {
    pub fn new(order: usize, symbols: usize, transitions: Vec<f64>) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(Bd3Error::config(format!("unsupported Markov order {order}")));
        }
        if symbols == 0 {
            return Err(Bd3Error::config("Markov source needs at least one symbol"));
        }
        let states = symbols.pow(order as u32);
        if transitions.len() != states * symbols {
            return Err(Bd3Error::dim(format!(
                "transition table has {} entries, expected {}",
                transitions.len(),
                states * symbols
            )));
        }
        for (r, row) in transitions.chunks(symbols).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Bd3Error::Data(format!("transition row {r} is not a distribution")));
            }
        }
        let mut src = Self {
            order,
            symbols,
            transitions,
            stationary: Vec::new(),
        };
        src.stationary = src.solve_stationary();
        Ok(src)
    }

    pub fn uniform(symbols: usize) -> Result<Self> {
        Self::new(1, symbols, vec![1.0 / symbols as f64; symbols * symbols])
    }

    /// Rows are `softmax(sharpness · z)` with standard normal `z`.
    pub fn random(order: usize, symbols: usize, sharpness: f64, rng: &mut SplitRng) -> Result<Self> {
        let states = symbols.pow(order as u32);
        let mut t = Vec::with_capacity(states * symbols);
        for _ in 0..states {
            let mut row: Vec<f64> = (0..symbols).map(|_| sharpness * rng.normal()).collect();
            crate::tensor::kernels::softmax_row(&mut row);
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            t.extend(row);
        }
        Self::new(order, symbols, t)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Stationary distribution over chain states.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Stationary marginal of a single symbol.
    pub fn symbol_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.symbols];
        for (state, &p) in self.stationary.iter().enumerate() {
            m[state % self.symbols] += p;
        }
        m
    }

    fn num_states(&self) -> usize {
        self.symbols.pow(self.order as u32)
    }

    fn state_of(&self, history: &[usize]) -> usize {
        history[history.len() - self.order..]
            .iter()
            .fold(0, |acc, &s| acc * self.symbols + s)
    }

    /// Lazy power iteration; the lazy chain is aperiodic with the same fixed point.
    fn solve_stationary(&self) -> Vec<f64> {
        let n = self.num_states();
        let s = self.symbols;
        let mut p = vec![1.0 / n as f64; n];
        for _ in 0..1_000_000 {
            let mut next = vec![0.0; n];
            for (state, &mass) in p.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let row = &self.transitions[state * s..(state + 1) * s];
                let shifted = (state * s) % n;
                for (c, &q) in row.iter().enumerate() {
                    next[shifted + c] += mass * q;
                }
            }
            let mut delta = 0.0;
            for (a, b) in p.iter_mut().zip(&next) {
                let v = 0.5 * (*a + b);
                delta += (v - *a).abs();
                *a = v;
            }
            if delta < 1e-15 {
                break;
            }
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    /// Next-symbol distribution given at least `order` preceding symbols.
    pub fn next_probs(&self, history: &[usize]) -> &[f64] {
        let st = self.state_of(history);
        &self.transitions[st * self.symbols..(st + 1) * self.symbols]
    }

    /// Probability of the first `min(len, order)` symbols under the stationary start.
    fn head_prob(&self, x: &[usize]) -> f64 {
        if self.order == 1 || x.len() >= 2 {
            if self.order == 1 {
                self.stationary[x[0]]
            } else {
                self.stationary[x[0] * self.symbols + x[1]]
            }
        } else {
            self.symbol_marginal()[x[0]]
        }
    }

    pub fn sample(&self, len: usize, rng: &mut SplitRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let state = rng.categorical(&self.stationary);
        if self.order == 1 {
            out.push(state);
        } else {
            out.push(state / self.symbols);
            if len > 1 {
                out.push(state % self.symbols);
            }
        }
        while out.len() < len {
            let next = rng.categorical(self.next_probs(&out));
            out.push(next);
        }
        out
    }

    /// −log p(x) in nats.
    pub fn exact_nll(&self, x: &[usize]) -> Result<f64> {
        if let Some(&bad) = x.iter().find(|&&s| s >= self.symbols) {
            return Err(Bd3Error::Vocabulary(format!("symbol {bad} outside source alphabet")));
        }
        if x.is_empty() {
            return Ok(0.0);
        }
        let head = self.head_prob(x);
        if head == 0.0 {
            return Err(Bd3Error::ZeroProbability { position: 0 });
        }
        let mut nll = -head.ln();
        for l in self.order..x.len() {
            let p = self.next_probs(&x[..l])[x[l]];
            if p == 0.0 {
                return Err(Bd3Error::ZeroProbability { position: l });
            }
            nll -= p.ln();
        }
        Ok(nll)
    }

    /// Per-symbol conditional log-probabilities log p(x^ℓ | x^{<ℓ}).
    pub fn conditional_log_probs(&self, x: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for l in 0..x.len() {
            let lp = if l == 0 {
                self.symbol_marginal()[x[0]].ln()
            } else if l < self.order {
                (self.head_prob(&x[..2]) / self.symbol_marginal()[x[0]]).ln()
            } else {
                self.next_probs(&x[..l])[x[l]].ln()
            };
            out.push(lp);
        }
        out
    }

    /// Entropy rate h = Σ_s π(s) H(P(s, ·)) in nats.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary
            .iter()
            .enumerate()
            .map(|(st, &pi)| {
                let row = &self.transitions[st * self.symbols..(st + 1) * self.symbols];
                pi * entropy(row)
            })
            .sum()
    }

    /// Exact expected NLL per token of a length-`len` sample, (H(start) + (len − order)·h)/len.
    pub fn per_token_entropy(&self, len: usize) -> f64 {
        if len == 0 {
            return 0.0;
        }
        if len < self.order {
            return entropy(&self.symbol_marginal());
        }
        (entropy(&self.stationary) + (len - self.order) as f64 * self.entropy_rate()) / len as f64
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum()
}
