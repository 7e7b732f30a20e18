//! Conditional flow matching on the straight noise-to-data path, and the
//! guided Euler sampler over a sway-warped time grid.
//!
//! Path: `x_t = (1 - t) x0 + t x1`, target velocity `x1 - x0`, with
//! `x0 ~ N(0, I)` and `t ~ U(0, 1)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ConditionBundle, DitModel};
use crate::params::Bound;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Upper end of the admissible sway coefficient range, `2 / (pi - 2)`.
pub const SWAY_MAX: f64 = 2.0 / (PI - 2.0);
pub const SWAY_MIN: f64 = -1.0;

/// A velocity field evaluated on plain tensors (sampling side).
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, x: &Tensor<T>, t: T, cond: &ConditionBundle<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> VelocityField<T> for DitModel<T> {
    fn velocity(&self, x: &Tensor<T>, t: T, cond: &ConditionBundle<T>) -> Result<Tensor<T>> {
        self.predict(x, t, cond)
    }
}

/// A velocity field evaluated on a gradient tape (training side).
pub trait TapeVelocity<T: Scalar> {
    fn velocity_on_tape(&self, tape: &mut Tape<T>, x_t: Var, t: T, cond: &ConditionBundle<T>) -> Result<Var>;
}

/// A model whose parameters are bound to a tape.
pub struct BoundModel<'a, T> {
    pub model: &'a DitModel<T>,
    pub params: Bound,
}

impl<'a, T: Scalar> BoundModel<'a, T> {
    pub fn new(model: &'a DitModel<T>, tape: &mut Tape<T>) -> Self {
        Self {
            model,
            params: model.bind(tape),
        }
    }
}

impl<T: Scalar> TapeVelocity<T> for BoundModel<'_, T> {
    fn velocity_on_tape(&self, tape: &mut Tape<T>, x_t: Var, t: T, cond: &ConditionBundle<T>) -> Result<Var> {
        self.model.forward(tape, &self.params, x_t, t, cond)
    }
}

/// One draw of the training path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: T,
    pub x_t: Tensor<T>,
    pub target_v: Tensor<T>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: T) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::shape("flow_sample", x0.shape(), x1.shape()));
        }
        let one_minus = T::one() - t;
        let x_t = Tensor::from_vec(
            x0.shape().to_vec(),
            x0.data().iter().zip(x1.data()).map(|(&a, &b)| one_minus * a + t * b).collect(),
        )?;
        let target_v = Tensor::from_vec(
            x0.shape().to_vec(),
            x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect(),
        )?;
        Ok(Self { x0, x1, t, x_t, target_v })
    }

    /// Draws `x0 ~ N(0, I)` then `t ~ U(0, 1)` from `rng`.
    pub fn draw(x1: &Tensor<T>, rng: &mut SeededRng) -> Result<Self> {
        let x0 = rng.normal_tensor(x1.shape(), 1.0);
        let t = T::of(rng.uniform());
        Self::new(x0, x1.clone(), t)
    }
}

/// A training example: data latent plus its conditioning.
#[derive(Debug, Clone)]
pub struct FlowItem<T> {
    pub x1: Tensor<T>,
    pub cond: ConditionBundle<T>,
}

/// Flow-matching loss on `tape`: mean over the batch and all latent
/// elements of `(model(x_t, t, cond) - (x1 - x0))^2`.
pub fn cfm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &impl TapeVelocity<T>,
    batch: &[FlowItem<T>],
    rng: &mut SeededRng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("cfm_loss needs a non-empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for item in batch {
        let s = FlowSample::draw(&item.x1, rng)?;
        let x_t = tape.leaf(&s.x_t);
        let target = tape.leaf(&s.target_v);
        let pred = model.velocity_on_tape(tape, x_t, s.t, &item.cond)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff)?;
        let sum = tape.sum(sq)?;
        count += s.target_v.numel();
        total = Some(match total {
            Some(acc) => tape.add(acc, sum)?,
            None => sum,
        });
    }
    let total = total.expect("non-empty batch");
    tape.scale(total, T::of(1.0 / count as f64))
}

/// Loss value only, on a throwaway tape.
pub fn cfm_loss_value<T: Scalar>(model: &DitModel<T>, batch: &[FlowItem<T>], rng: &mut SeededRng) -> Result<T> {
    let mut tape = Tape::new();
    let bound = BoundModel::new(model, &mut tape);
    let loss = cfm_loss(&mut tape, &bound, batch, rng)?;
    Ok(tape.value(loss)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub sway_coef: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 64,
            sway_coef: -1.0,
            guidance_scale: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::config("nfe must be at least 1"));
        }
        check_sway(self.sway_coef)?;
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Model evaluations per sample: two per guided step, one when the
    /// condition is already unconditional or the scale is exactly 0 or 1.
    pub fn model_calls(&self, unconditional: bool) -> usize {
        if unconditional || self.guidance_scale == 0.0 || self.guidance_scale == 1.0 {
            self.nfe
        } else {
            2 * self.nfe
        }
    }
}

fn check_sway(s: f64) -> Result<()> {
    // tolerate rounding at the upper end when the bound is typed in decimal
    if !(SWAY_MIN..=SWAY_MAX + 1e-12).contains(&s) {
        return Err(Error::contract(format!("sway coefficient {s} outside [-1, 2/(pi-2)]")));
    }
    Ok(())
}

/// `nfe + 1` times: `t_k = u + s (cos(pi u / 2) - 1 + u)` at `u = k / nfe`,
/// with the endpoints pinned to exactly 0 and 1.
pub fn sway_schedule(nfe: usize, s: f64) -> Result<Vec<f64>> {
    if nfe == 0 {
        return Err(Error::contract("nfe must be at least 1"));
    }
    check_sway(s)?;
    let mut ts: Vec<f64> = (0..=nfe)
        .map(|k| {
            let u = k as f64 / nfe as f64;
            u + s * ((PI * u / 2.0).cos() - 1.0 + u)
        })
        .collect();
    ts[0] = 0.0;
    ts[nfe] = 1.0;
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract(format!("sway grid not strictly increasing for nfe={nfe}, s={s}")));
    }
    Ok(ts)
}

/// `v_uncond + w (v_cond - v_uncond)`, the unconditional branch dropping
/// text, video and any extra tokens together.
pub fn guided_velocity<T: Scalar>(
    field: &(impl VelocityField<T> + ?Sized),
    x: &Tensor<T>,
    t: T,
    cond: &ConditionBundle<T>,
    w: f64,
) -> Result<Tensor<T>> {
    if !(w >= 0.0) {
        return Err(Error::contract("guidance scale must be non-negative"));
    }
    let uncond = ConditionBundle::unconditional();
    if cond.is_unconditional() {
        return field.velocity(x, t, &uncond);
    }
    if w == 1.0 {
        return field.velocity(x, t, cond);
    }
    let vu = field.velocity(x, t, &uncond)?;
    if w == 0.0 {
        return Ok(vu);
    }
    let vc = field.velocity(x, t, cond)?;
    let w = T::of(w);
    let data = vu.data().iter().zip(vc.data()).map(|(&u, &c)| u + w * (c - u)).collect();
    Tensor::from_vec(vu.shape().to_vec(), data)
}

/// Integrates from a seeded Gaussian draw of `shape`.
pub fn sample<T: Scalar>(
    field: &(impl VelocityField<T> + ?Sized),
    cond: &ConditionBundle<T>,
    cfg: &SamplerConfig,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let x0 = SeededRng::new(cfg.seed).normal_tensor(shape, 1.0);
    integrate(field, x0, cond, cfg)
}

/// Euler integration of the guided field from `x0` over the sway grid.
pub fn integrate<T: Scalar>(
    field: &(impl VelocityField<T> + ?Sized),
    x0: Tensor<T>,
    cond: &ConditionBundle<T>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let grid = sway_schedule(cfg.nfe, cfg.sway_coef)?;
    let mut x = x0;
    for (k, w) in grid.windows(2).enumerate() {
        let step = k as u64;
        let v = guided_velocity(field, &x, T::of(w[0]), cond, cfg.guidance_scale).map_err(|e| match e {
            Error::NonFinite(op) => Error::Divergence {
                step,
                what: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let dt = T::of(w[1] - w[0]);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "non-finite state".into(),
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sway_zero_is_uniform() {
        let ts = sway_schedule(8, 0.0).unwrap();
        for (k, t) in ts.iter().enumerate() {
            assert!((t - k as f64 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sway_minus_one_at_half() {
        let ts = sway_schedule(2, -1.0).unwrap();
        // 0.5 - (cos(pi/4) - 0.5)
        let expect = 1.0 - (PI / 4.0).cos();
        assert!((ts[1] - expect).abs() < 1e-15);
        assert!((ts[1] - 0.2929).abs() < 1e-4);
    }

    #[test]
    fn sway_range_is_enforced() {
        assert!(sway_schedule(4, -1.01).is_err());
        assert!(sway_schedule(4, SWAY_MAX + 0.01).is_err());
        assert!(sway_schedule(0, 0.0).is_err());
        assert!(sway_schedule(16, SWAY_MAX).is_ok());
    }

    #[test]
    fn flow_sample_endpoints_and_target() {
        let mut rng = SeededRng::new(3);
        let x0: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let x1: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let s0 = FlowSample::new(x0.clone(), x1.clone(), 0.0).unwrap();
        let s1 = FlowSample::new(x0.clone(), x1.clone(), 1.0).unwrap();
        assert_eq!(s0.x_t, x0);
        assert_eq!(s1.x_t, x1);
        let s = FlowSample::new(x0.clone(), x1.clone(), 0.3).unwrap();
        for i in 0..12 {
            let want = 0.7 * x0.data()[i] + 0.3 * x1.data()[i];
            assert!((s.x_t.data()[i] - want).abs() < 1e-12);
            assert_eq!(s.target_v.data()[i], x1.data()[i] - x0.data()[i]);
        }
    }
}
