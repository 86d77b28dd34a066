//! SGD with classical momentum and L2 weight decay added to the gradient,
//! plus the step-decay learning-rate schedule.

use std::collections::HashMap;

use crate::nn::Param;
use crate::tensor::Tensor;

pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<u64, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// v ← μ·v + (g + wd·θ); θ ← θ − lr·v
    pub fn step_param(&mut self, param: &mut Param, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.value.shape(), grad.shape());
        let n = param.value.numel();
        let v = self
            .velocity
            .entry(param.id())
            .or_insert_with(|| vec![0.0; n]);
        let theta = param.value.data();
        let g = grad.data();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            v[i] = self.momentum * v[i] + g[i] + self.weight_decay * theta[i];
            next.push(theta[i] - lr * v[i]);
        }
        param.value = Tensor::from_parts(param.value.shape().to_vec(), next);
    }
}

/// Initial rate multiplied by `factor` at each listed epoch boundary.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut p = Param::new("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let before = p.value.clone();
        sgd.step_param(&mut p, &Tensor::zeros(&[2]), 0.1);
        assert_eq!(p.value, before);
    }

    #[test]
    fn plain_gradient_step_on_square() {
        // f(x) = x^2 at x = 1 with lr 0.1: x' = 1 - 0.1 * 2 = 0.8.
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut p = Param::new("x", Tensor::scalar(1.0));
        sgd.step_param(&mut p, &Tensor::scalar(2.0), 0.1);
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut sgd = Sgd::new(0.5, 0.0);
        let mut p = Param::new("x", Tensor::scalar(0.0));
        sgd.step_param(&mut p, &Tensor::scalar(1.0), 1.0);
        assert!((p.value.data()[0] + 1.0).abs() < 1e-15);
        sgd.step_param(&mut p, &Tensor::scalar(1.0), 1.0);
        // v = 0.5*1 + 1 = 1.5; x = -1 - 1.5 = -2.5
        assert!((p.value.data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn decay_pulls_towards_zero() {
        let mut sgd = Sgd::new(0.0, 0.1);
        let mut p = Param::new("x", Tensor::scalar(1.0));
        sgd.step_param(&mut p, &Tensor::scalar(0.0), 1.0);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn convergence_on_convex_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3). The rate keeps the momentum
        // iteration overdamped, so the loss decays monotonically.
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut p = Param::new("x", Tensor::scalar(-5.0));
        let mut losses = Vec::new();
        for _ in 0..200 {
            let x = p.value.data()[0];
            losses.push((x - 3.0) * (x - 3.0));
            let g = Tensor::scalar(2.0 * (x - 3.0));
            sgd.step_param(&mut p, &g, 0.001);
        }
        for w in losses[20..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(*losses.last().unwrap() < 0.01 * losses[0]);
    }

    #[test]
    fn schedule_steps_down() {
        let s = LrSchedule {
            initial: 0.01,
            decay_epochs: vec![12, 24],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(11), 0.01);
        assert!((s.lr_at(12) - 0.001).abs() < 1e-12);
        assert!((s.lr_at(24) - 0.0001).abs() < 1e-12);
        assert!((s.lr_at(29) - 0.0001).abs() < 1e-12);
    }
}
