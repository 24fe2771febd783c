use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::graph::Tensor;
use super::mlp::Mlp;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected adaptive-moment state for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros = || net.params().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} gradient tensors for {} parameters", grads.len(), self.m.len()),
            ));
        }
        for ((g, p), m) in grads.iter().zip(net.params()).zip(&self.m) {
            if g.dim() != p.dim() || m.dim() != p.dim() {
                return Err(shape_err(
                    "adam_step",
                    format!("gradient {:?} vs parameter {:?}", g.dim(), p.dim()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::seed;

    fn net() -> Mlp {
        Mlp::new(&[2, 3, 1], Activation::Relu, &mut seed::rng(5)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut n = net();
        let before = n.clone();
        let mut opt = Adam::new(&n, AdamConfig::default());
        let zeros: Vec<_> = n.params().map(|p| Array2::zeros(p.dim())).collect();
        for _ in 0..5 {
            opt.step(&mut n, &zeros).unwrap();
        }
        assert_eq!(n, before);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut n = net();
        let before = n.clone();
        let cfg = AdamConfig { eps: 1e-14, ..AdamConfig::default() };
        let mut opt = Adam::new(&n, cfg);
        let grads: Vec<_> = n
            .params()
            .enumerate()
            .map(|(k, p)| Array2::from_elem(p.dim(), if k % 2 == 0 { 0.37 } else { -2.5 }))
            .collect();
        opt.step(&mut n, &grads).unwrap();
        for ((after, before), g) in n.params().zip(before.params()).zip(&grads) {
            Zip::from(after).and(before).and(g).for_each(|&a, &b, &g| {
                assert!((a - b + cfg.lr * g.signum()).abs() < 1e-12);
            });
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut n = net();
        let mut opt = Adam::new(&n, AdamConfig::default());
        let wrong = vec![Array2::zeros((1, 1))];
        assert!(opt.step(&mut n, &wrong).is_err());
        let mut shapes: Vec<_> = n.params().map(|p| Array2::zeros(p.dim())).collect();
        shapes[0] = Array2::zeros((9, 9));
        assert!(opt.step(&mut n, &shapes).is_err());
    }
}
