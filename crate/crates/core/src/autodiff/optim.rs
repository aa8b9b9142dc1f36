use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update over every parameter, then clears gradients.
///
/// Fails without touching anything if any parameter lacks a gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
    let missing: Vec<String> = store
        .entries
        .iter()
        .filter(|(_, e)| e.grad.is_none())
        .map(|(k, _)| k.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGrad(missing));
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for e in store.entries.values_mut() {
        let g = e.grad.take().expect("checked above");
        for (i, x) in e.value.data_mut().iter_mut().enumerate() {
            let gi = g[i].f64();
            let m = b1 * e.m[i].f64() + (1.0 - b1) * gi;
            let v = b2 * e.v[i].f64() + (1.0 - b2) * gi * gi;
            e.m[i] = T::of(m);
            e.v[i] = T::of(v);
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            *x = T::of(x.f64() - update);
        }
    }
    Ok(())
}

/// Cosine decay from `lr0` to `floor · lr0` over `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let frac = (step.min(total - 1) as f64) / (total - 1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    lr0 * (floor + (1.0 - floor) * cos)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .entries
        .values()
        .filter_map(|e| e.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in store.entries.values_mut().filter_map(|e| e.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}
