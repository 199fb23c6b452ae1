//! Central-difference gradient oracle.
//!
//! The error metric is `max |numeric - analytic| / max(1, |analytic|)` over
//! the checked components.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};
use crate::rng::{rng_from, Rng};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many randomly chosen components per tensor.
    pub max_components: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_components: None,
            seed: 0,
        }
    }
}

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

fn components(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_components {
        Some(k) if k < len => {
            let mut rng = rng_from(opts.seed, &[salt]);
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks the recorded gradient of scalar `f` with respect to input `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |input: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(input);
        scalar_of(f(&tape, v)?)
    };
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&tape, xv)?;
    let f0 = scalar_of(loss)?;
    if eval(x.clone())?.to_bits() != f0.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let grads = tape.backward(loss)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros).to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(numeric, a));
    }
    Ok(worst)
}

/// Checks the gradient of scalar `f` with respect to every parameter in
/// `params`. Parameters are perturbed in place and restored.
pub fn check_param_grads<F>(params: &mut ParamSet, f: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    params.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let f0 = scalar_of(loss)?;
    let grads = tape.backward(loss)?;
    params.accumulate(&tape, &grads)?;
    let analytic: Vec<Vec<f64>> = params.ids().map(|i| params.grad(i).to_vec()).collect();
    params.zero_grads();

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        scalar_of(f(&tape, p)?)
    };
    if eval(params)?.to_bits() != f0.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let mut worst = 0.0f64;
    for id in params.ids() {
        for j in components(params.value(id).len(), opts, id as u64) {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + opts.h;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig - opts.h;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            worst = worst.max(rel_err(numeric, analytic[id][j]));
        }
    }
    Ok(worst)
}

/// Standard-normal matrix, for randomized checks.
pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape by construction")
}
