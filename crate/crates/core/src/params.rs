//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::ops::Index;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named trainable tensors. Order is fixed at construction
/// and defines the checkpoint record order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        t.set_requires_grad(true);
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(_, t)| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(&t.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    /// Adds gradients from a differentiated tape into each parameter's
    /// gradient buffer. Parameters that received no gradient get zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::format(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.shape() != shape {
            return Err(Error::shape("set_param", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Overwrites every parameter with `N(0, std^2)` draws.
    pub fn randomize(&mut self, rng: &mut SeededRng, std: f64) {
        for (_, t) in &mut self.entries {
            for x in t.data_mut() {
                *x = T::of(rng.normal() * std);
            }
        }
    }
}

/// Affine layer `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearInit {
    /// `N(0, 1/fan_in)` weights, zero bias.
    Scaled,
    /// All zeros.
    Zero,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: LinearInit,
        rng: &mut SeededRng,
    ) -> Self {
        let w = match init {
            LinearInit::Scaled => rng.normal_tensor(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
            LinearInit::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = store.add(format!("{name}.weight"), w);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }

    pub fn numel(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}
