use super::params::ParamSet;
use super::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|i| vec![0.0; params.value(i).len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len()
            || params
                .ids()
                .any(|i| params.value(i).len() != self.m[i].len())
        {
            return Err(shape_err(
                "adam_step",
                "parameter shapes differ from optimizer state",
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in params.ids() {
            let grad = params.grad(i).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = params.value_mut(i).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let before = set.value(id).clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &set);
        adam.step(&mut set).unwrap();
        assert_eq!(set.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias correction gives mhat = vhat = 1.
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::scalar(1.0));
        let tape = Tape::new();
        let w = set.bind(&tape, id);
        let g = tape.backward(w.sum().unwrap()).unwrap();
        set.accumulate(&tape, &g).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &set);
        adam.step(&mut set).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((set.value(id).item() - expected).abs() < 1e-15);
        assert!(!set.has_nonzero_grad());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &set);
        for _ in 0..200 {
            let tape = Tape::new();
            let w = set.bind(&tape, id);
            let loss = w.mul(w).unwrap().sum().unwrap();
            let g = tape.backward(loss).unwrap();
            set.accumulate(&tape, &g).unwrap();
            adam.step(&mut set).unwrap();
        }
        let norm = set
            .value(id)
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn state_shape_mismatch_is_error() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &set);
        set.add("extra", Tensor::scalar(1.0));
        assert!(adam.step(&mut set).is_err());
    }
}
