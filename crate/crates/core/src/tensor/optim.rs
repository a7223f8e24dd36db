use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Bd3Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One decoupled-weight-decay Adam update on a flat slice.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        if lr == 0.0 {
            continue;
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[i]);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn set_steps_taken(&mut self, step: usize) {
        self.step = step;
    }

    /// Applies the stored gradients of `store` and leaves them untouched.
    /// First and second moments as named tensors, for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("opt.step".to_string(), Tensor::scalar(self.step as f64))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("opt.m.{i}"), Tensor::new(vec![m.len()], m.clone()).expect("vector")));
            out.push((format!("opt.v.{i}"), Tensor::new(vec![v.len()], v.clone()).expect("vector")));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Bd3Error::Checkpoint(format!("missing {name}")))
        };
        let step = find("opt.step")?.item()?;
        for i in 0..self.m.len() {
            for (buf, key) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let t = find(&format!("opt.{key}.{i}"))?;
                if t.numel() != buf.len() {
                    return Err(Bd3Error::Checkpoint(format!("optimizer state {key}.{i} has the wrong size")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        self.step = step as usize;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> StepInfo {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let sq: f64 = store.iter().map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
        let grad_norm = sq.sqrt();
        let factor = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let cfg = self.config;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let g: Vec<f64>;
            let grads = if factor == 1.0 {
                p.grad.data()
            } else {
                g = p.grad.data().iter().map(|x| x * factor).collect();
                &g
            };
            adamw_step(
                p.value.data_mut(),
                grads,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                (cfg.beta1, cfg.beta2),
                cfg.eps,
                cfg.weight_decay,
            );
        }
        StepInfo {
            lr,
            grad_norm,
            clipped: factor < 1.0,
        }
    }
}
