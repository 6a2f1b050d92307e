use std::collections::BTreeMap;

use diffcore::{GradientVector, ParamStore, Tensor};

use super::config::OptimConfig;
use crate::error::{Error, Result};

/// Linear warmup over `warmup_steps`, then cosine decay to `lr·min_lr_ratio` at `total`.
pub fn lr_at(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Euclidean norm accumulated in f64, in layout order.
pub fn global_norm(grad: &GradientVector<f32>) -> f64 {
    grad.flat().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| (p.name.clone(), Tensor::zeros(p.value.shape()))).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// Clips `grad` to the configured norm, then applies one update at rate `lr`.
    /// Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore, grad: &mut GradientVector<f32>, lr: f64) -> Result<f64> {
        let norm = global_norm(grad);
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            grad.scale((self.cfg.grad_clip / norm) as f32);
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.cfg.eps as f32;
        let layout = grad.layout().clone();
        for (i, name) in layout.names().iter().enumerate() {
            let g = grad.block(i);
            let p = params.get_mut(name).ok_or_else(|| Error::Invalid(format!("no parameter {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Invalid(format!("no optimizer state for {name}")))?;
            let v = self.v.get_mut(name).expect("moments are created together");
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }

    /// Zeroes both moments of the given rows of a matrix parameter.
    pub fn reset_rows(&mut self, name: &str, rows: &[usize]) {
        for table in [&mut self.m, &mut self.v] {
            if let Some(t) = table.get_mut(name) {
                let w = t.shape().get(1).copied().unwrap_or(1);
                for &r in rows {
                    t.data_mut()[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }
}
