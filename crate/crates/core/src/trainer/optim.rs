//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Published settings: lr 3e-5, clip 0.2, batch 128.
    pub fn paper() -> Self {
        Self {
            lr: 3e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_norm: 0.2,
            batch_size: 128,
        }
    }

    /// Desk-scale settings for the synthetic set.
    pub fn toy() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}

/// Clips the gradient buffers held by a parameter store.
pub fn clip_store_grads<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let mut grads: Vec<&mut [T]> = store
        .iter_mut()
        .filter_map(|(_, t)| t.grad_mut().map(|g| g.as_mut_slice()))
        .collect();
    clip_grad_norm(&mut grads, max_norm)
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], cfg: &OptimizerConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[params.len(), grads.len()], &[self.m.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", &[p.len(), g.len()], &[self.m[i].len()]));
            }
        }
        let step = self.t + 1;
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                step,
                what: "non-finite gradient".into(),
            });
        }
        self.t = step;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates a parameter store from its gradient buffers; parameters
    /// without a buffer are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &OptimizerConfig) -> Result<()> {
        let grads: Vec<Vec<T>> = store
            .iter()
            .map(|(_, p)| p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [T]> = store.iter_mut().map(|(_, p)| p.data_mut()).collect();
        self.update(&mut params, &grad_refs, cfg)
    }
}
