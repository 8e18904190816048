//! SGD with momentum and weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter momentum state plus the fixed hyperparameters.
///
/// Update rule: v <- momentum * v + grad + weight_decay * param,
/// then param <- param - lr * v.
#[derive(Debug, Clone)]
pub struct SgdOptimizer<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdOptimizer<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        if lr <= T::zero() {
            return Err(Error::config("sgd: learning rate must be positive".to_string()));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::config("sgd: momentum must be in [0, 1)".to_string()));
        }
        if weight_decay < T::zero() {
            return Err(Error::config("sgd: weight decay must be non-negative".to_string()));
        }
        Ok(SgdOptimizer { lr, momentum, weight_decay, velocity: BTreeMap::new() })
    }

    pub fn buffer_count(&self) -> usize {
        self.velocity.len()
    }

    /// Apply one update to every named parameter. Gradients are looked up
    /// by name; a missing gradient is an error naming the parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Vec<T>>,
        names: &[String],
    ) -> Result<()> {
        for name in names {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::graph(format!("sgd: unknown parameter '{name}'")))?;
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::numeric(format!("sgd: missing gradient for parameter '{name}'")))?;
            if grad.len() != param.numel() {
                return Err(Error::shape(format!(
                    "sgd: gradient length {} does not match parameter '{name}' ({})",
                    grad.len(),
                    param.numel()
                )));
            }
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::from_vec(vec![1], vec![value]).unwrap());
        m
    }

    fn grad_of(value: f64) -> BTreeMap<String, Vec<f64>> {
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), vec![value]);
        g
    }

    #[test]
    fn plain_gradient_step() {
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.0).unwrap();
        let mut params = single_param(1.0);
        opt.step(&mut params, &grad_of(1.0), &["p".to_string()]).unwrap();
        assert!((params["p"].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_hand_iterated() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0).unwrap();
        let mut params = single_param(0.0);
        let names = ["p".to_string()];
        opt.step(&mut params, &grad_of(1.0), &names).unwrap();
        assert!((params["p"].data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut params, &grad_of(1.0), &names).unwrap();
        assert!((params["p"].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn pure_weight_decay() {
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.5).unwrap();
        let mut params = single_param(1.0);
        opt.step(&mut params, &grad_of(0.0), &["p".to_string()]).unwrap();
        assert!((params["p"].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.0).unwrap();
        let mut params = single_param(1.0);
        let err = opt.step(&mut params, &BTreeMap::new(), &["p".to_string()]).unwrap_err();
        assert!(err.to_string().contains("'p'"), "{err}");
    }

    #[test]
    fn one_buffer_per_parameter() {
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0).unwrap();
        let mut params = single_param(1.0);
        params.insert("q".to_string(), Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let mut grads = grad_of(1.0);
        grads.insert("q".to_string(), vec![1.0, 1.0]);
        opt.step(&mut params, &grads, &["p".to_string(), "q".to_string()]).unwrap();
        assert_eq!(opt.buffer_count(), 2);
    }
}
