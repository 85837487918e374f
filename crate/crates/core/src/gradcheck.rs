//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values on an inference
//! tape, so it shares no code with the reverse pass it checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Max-norm relative error `max|a - n| / max(max|a|, max|n|)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of a tensor.
pub fn numeric_gradient(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape(), out)
}

/// Relative error for each input of `f` (which must return a scalar).
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let mut errs = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_gradient(x, step, |probe| {
            let mut t = Tape::inference();
            let consts: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| Var::constant(if j == i { probe.clone() } else { v.clone() }))
                .collect();
            Ok(f(&mut t, &consts)?.value().item())
        })?;
        errs.push(relative_error(&analytic, &numeric));
    }
    Ok(errs)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub rel_err: f64,
    pub max_abs_grad: f64,
}

/// Compare the tape gradient of every parameter with central differences.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(&loss)?;

    let mut probe_store = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let x = store.get(id).clone();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_gradient(&x, step, |probe| {
            probe_store.set(id, probe.clone())?;
            let mut t = Tape::inference();
            Ok(f(&mut t, &probe_store)?.value().item())
        })?;
        probe_store.set(id, x)?;
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            numel: analytic.numel(),
            rel_err: relative_error(&analytic, &numeric),
            max_abs_grad: analytic.max_abs(),
        });
    }
    Ok(out)
}
