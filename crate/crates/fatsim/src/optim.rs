//! SGD with classical momentum and the per-round learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Velocity state for SGD with momentum: v <- m*v + g, theta <- theta - lr*v.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParameterSet,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, params: &ParameterSet) -> Self {
        assert!(lr >= 0.0 && (0.0..1.0).contains(&momentum));
        OptimizerState {
            lr,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    /// One update over every parameter. Gradients must cover all parameters
    /// (zero tensors for untouched ones, as `backward` produces).
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).ok_or_else(|| Error::Config(format!(
                "gradient map missing parameter {name}"
            )))?;
            let v = self.velocity.get_mut(&name).expect("velocity mirrors params");
            let p = params.get_mut(&name).unwrap();
            g.check_same_shape(p, "sgd_step")?;
            for i in 0..v.len() {
                let vi = self.momentum * v.data()[i] + g.data()[i];
                v.data_mut()[i] = vi;
            }
            for i in 0..p.len() {
                p.data_mut()[i] -= self.lr * v.data()[i];
            }
        }
        Ok(())
    }
}

/// Multiplicative per-round decay: lr * (1 - rate).
pub fn decay_lr(lr: f64, rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDecayRate(rate));
    }
    Ok(lr * (1.0 - rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![1], vec![v]));
        g
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(0.1, 0.0, &p);
        opt.step(&mut p, &grad(2.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_velocity_is_identity() {
        let mut p = one_param(1.5);
        let mut opt = OptimizerState::new(0.1, 0.9, &p);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = one_param(-0.3);
        let mut opt = OptimizerState::new(0.0, 0.9, &p);
        opt.step(&mut p, &grad(7.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], -0.3);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, m, g1, g2) = (0.05, 0.9, 2.0, -1.0);
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(lr, m, &p);
        opt.step(&mut p, &grad(g1)).unwrap();
        opt.step(&mut p, &grad(g2)).unwrap();
        let v1 = g1;
        let t1 = 1.0 - lr * v1;
        let v2 = m * v1 + g2;
        let t2 = t1 - lr * v2;
        assert!((p.get("w").unwrap().data()[0] - t2).abs() <= 1e-12);
    }

    #[test]
    fn decay_schedule_values() {
        assert!((decay_lr(0.1, 0.05).unwrap() - 0.095).abs() < 1e-15);
        assert!((decay_lr(0.03, 0.035).unwrap() - 0.02895).abs() < 1e-15);
        assert_eq!(decay_lr(0.42, 0.0).unwrap(), 0.42);
        assert!(decay_lr(0.1, 1.0).is_err());
        assert!(decay_lr(0.1, -0.1).is_err());
    }
}
