//! Optimizers and schedules not provided by candle-nn.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// SGD with classical momentum and decoupled-from-nothing weight decay, the
/// standard CIFAR victim recipe (`v = mu*v + g + wd*w; w -= lr*v`).
pub struct MomentumSgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_detached_tensor() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_detached_tensor() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100) < 1e-12);
    }

    #[test]
    fn momentum_sgd_matches_hand_rolled_scalar() {
        let device = Device::Cpu;
        let w = Var::from_tensor(&Tensor::from_vec(vec![1.0f32], (1,), &device).unwrap()).unwrap();
        let mut opt = MomentumSgd::new(vec![w.clone()], 0.1, 0.9, 0.0);
        // loss = 0.5 * w^2, grad = w
        let mut expect_w = 1.0f64;
        let mut expect_v = 0.0f64;
        for _ in 0..3 {
            let loss = (w.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads).unwrap();
            let g = expect_w;
            expect_v = 0.9 * expect_v + g;
            expect_w -= 0.1 * expect_v;
            let got = w.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
            assert!((got - expect_w).abs() < 1e-6, "got {got}, want {expect_w}");
        }
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let device = Device::Cpu;
        let w = Var::from_tensor(&Tensor::from_vec(vec![1.0f32], (1,), &device).unwrap()).unwrap();
        let mut opt = MomentumSgd::new(vec![w.clone()], 0.1, 0.0, 0.5);
        // loss independent of w -> only decay acts... but grads.get misses
        // vars with no gradient, so couple it weakly.
        let loss = (w.as_tensor() * 1e-12).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads).unwrap();
        let got = w.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((got - 0.95).abs() < 1e-4, "got {got}");
    }
}
