//! AdamW optimizer over a [`ParamStore`].
//!
//! Decoupled weight decay is applied only to parameters whose name ends
//! in `/w` — the crate-wide convention for weight matrices and
//! convolution kernels. Biases, normalization gains, embeddings, and
//! learned tokens are exempt, following standard practice.

use indexmap::IndexMap;

use crate::error::Result;
use crate::tensor::ParamStore;

/// Hyper-parameters for [`AdamW`]. Learning rates are supplied per step
/// (they vary by parameter group and schedule), everything else is fixed
/// at construction.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub eps: f64,
    /// Decoupled weight-decay coefficient (applied to `/w` tensors).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW state: first/second moment buffers per parameter plus the step
/// counter used for bias correction.
pub struct AdamW {
    cfg: AdamWConfig,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    /// Fresh optimizer state.
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, m: IndexMap::new(), v: IndexMap::new(), t: 0 }
    }

    /// Applies one update from the gradients currently accumulated in
    /// `store`. `lr_for` maps a parameter name to its learning rate this
    /// step (parameter groups and schedules live in the caller).
    /// Gradients are left untouched; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore, lr_for: &dyn Fn(&str) -> f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for p in store.iter_mut() {
            let lr = lr_for(&p.name);
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.numel()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.numel()]);
            let decay = if p.name.ends_with("/w") { self.cfg.weight_decay } else { 0.0 };
            let grad = p.grad.data().to_vec();
            for (i, value) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *value -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *value);
            }
        }
        Ok(())
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Rescales the accumulated gradients so their global L2 norm is at
/// most `max_norm`, returning the pre-clip norm. A non-positive
/// `max_norm` disables clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
