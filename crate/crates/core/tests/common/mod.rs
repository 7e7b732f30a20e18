//! Central-difference gradient oracle shared by the integration suites.
#![allow(dead_code)]

pub mod fixtures;

use ysnd_core::model::{ConditionBundle, DitModel};
use ysnd_core::tensor::Tensor;
use ysnd_core::{SeededRng, Tape, Var};

pub const H: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest violation ratio `|a-n| / max(rtol*max(|a|,|n|), atol)`; <= 1 passes.
pub fn worst_ratio(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (rtol * a.abs().max(n.abs())).max(atol))
        .fold(0.0, f64::max)
}

pub type OpFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Checks the gradient of `sum(op(inputs) * w)` for random projection `w`
/// against central differences, for every input coordinate.
pub fn check_op(inputs: &[Tensor<f64>], op: &OpFn<'_>, rtol: f64, atol: f64, seed: u64) -> f64 {
    // projection weights sized from a dry run
    let mut dry = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| dry.leaf(t)).collect();
    let out = op(&mut dry, &vars);
    let mut rng = SeededRng::new(seed);
    let w: Tensor<f64> = rng.normal_tensor(dry.shape(out), 1.0);

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut tape, &vars);
    let wv = tape.leaf(&w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let f = |x: &[f64]| {
            let mut perturbed = inputs.to_vec();
            perturbed[k] = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).unwrap();
            eval(&perturbed)
        };
        let numeric = central_diff(&f, input.data(), H);
        worst = worst.max(worst_ratio(&analytic, &numeric, rtol, atol));
    }
    worst
}

/// `sum(model(x, t, cond) * w)` evaluated without a gradient tape.
pub fn projected_output(model: &DitModel<f64>, x: &Tensor<f64>, t: f64, cond: &ConditionBundle<f64>, w: &Tensor<f64>) -> f64 {
    let v = model.predict(x, t, cond).unwrap();
    v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Compares analytic parameter and input gradients of the projected model
/// output with central differences over every parameter entry.
pub fn check_model(model: &DitModel<f64>, x: &Tensor<f64>, t: f64, cond: &ConditionBundle<f64>, rtol: f64, atol: f64) -> f64 {
    let mut rng = SeededRng::new(99);
    let w: Tensor<f64> = rng.normal_tensor(x.shape(), 1.0);

    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let out = model.forward(&mut tape, &p, xv, t, cond).unwrap();
    let wv = tape.leaf(&w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut grads_model = model.clone();
    grads_model.params_mut().collect_grads(&tape, &p).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = model.params().find(name).unwrap();
        let analytic = grads_model.params().get(id).grad().unwrap().to_vec();
        let base = model.params().get(id).data().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            probe.params_mut().get_mut(id).data_mut()[i] = base[i] + H;
            let fp = projected_output(&probe, x, t, cond, &w);
            probe.params_mut().get_mut(id).data_mut()[i] = base[i] - H;
            let fm = projected_output(&probe, x, t, cond, &w);
            probe.params_mut().get_mut(id).data_mut()[i] = base[i];
            numeric.push((fp - fm) / (2.0 * H));
        }
        let r = worst_ratio(&analytic, &numeric, rtol, atol);
        assert!(r <= 1.0, "parameter {name} (#{pi}) gradient mismatch ratio {r}");
        worst = worst.max(r);
    }

    let analytic_x = tape.grad(xv).unwrap().to_vec();
    let f = |d: &[f64]| {
        let xx = Tensor::from_vec(x.shape().to_vec(), d.to_vec()).unwrap();
        projected_output(model, &xx, t, cond, &w)
    };
    let numeric_x = central_diff(&f, x.data(), H);
    worst.max(worst_ratio(&analytic_x, &numeric_x, rtol, atol))
}
