use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor<f32>]) -> Self {
        Self {
            cfg,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Non-finite gradients abort before any parameter
    /// is touched.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!("gradient {k} has shape {:?}, expected {:?}", g.shape(), p.shape())));
            }
            if !g.all_finite() {
                return Err(Error::Diverged {
                    step: self.t as usize + 1,
                    detail: format!("non-finite gradient in parameter {k}"),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor<f32>> {
        vec![Tensor::vector(vec![0.5, -1.0, 2.0]), Tensor::scalar(3.0)]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let zeros: Vec<Tensor<f32>> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for _ in 0..10 {
            opt.step(&mut p, &zeros).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::vector(vec![1.0, 1.0, 1.0])];
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Tensor::vector(vec![0.3, -5.0, 1e3])]).unwrap();
        let want = [0.99f32, 1.01, 0.99];
        for (x, w) in p[0].data().iter().zip(want) {
            assert!((x - w).abs() < 1e-6, "{x} vs {w}");
        }
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(0.0f32)];
        let mut opt = Adam::new(cfg, &p);
        for k in 1..=5 {
            opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
            assert!((p[0].item() + 0.1 * k as f32).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let grads = vec![Tensor::vector(vec![0.0, f32::NAN, 0.0]), Tensor::scalar(1.0)];
        assert!(matches!(opt.step(&mut p, &grads), Err(Error::Diverged { step: 1, .. })));
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut p = params();
            let mut opt = Adam::new(AdamConfig::default(), &p);
            for k in 0..20 {
                let g = vec![Tensor::vector(vec![k as f32, -0.5, 0.25 * k as f32]), Tensor::scalar(1.0 / (k + 1) as f32)];
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
