//! Nesterov-accelerated Adam with bias correction, coupled weight decay and
//! a per-epoch exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{s, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// ψ in the momentum schedule `μ_t = β₁(1 − ½·0.96^{tψ})`.
    pub momentum_decay: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
}

impl Default for NAdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            momentum_decay: 4e-3,
            lr_decay: 0.98,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step and
/// epoch counters.
#[derive(Debug, Clone)]
pub struct NAdam<T> {
    pub config: NAdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    epoch: u32,
    mu_product: f64,
}

impl<T: Scalar> NAdam<T> {
    pub fn new(config: NAdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            epoch: 0,
            mu_product: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// `lr · decay^epoch`.
    pub fn effective_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powi(self.epoch as i32)
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    fn momentum_at(&self, t: u64) -> f64 {
        self.config.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.config.momentum_decay))
    }

    /// Applies one update. `grads[i] = None` is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "nadam: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let want = self.first[i].shape();
            if p.shape() != want || g.as_ref().is_some_and(|g| g.shape() != want) {
                return Err(TensorError::Shape {
                    op: "nadam",
                    detail: format!("parameter {i}: state {want:?} vs {:?}", p.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let mu = self.momentum_at(t);
        let mu_next = self.momentum_at(t + 1);
        self.mu_product *= mu;
        let lr = self.effective_lr();
        let grad_coef = s::<T>(lr * (1.0 - mu) / (1.0 - self.mu_product));
        let mom_coef = s::<T>(lr * mu_next / (1.0 - self.mu_product * mu_next));
        let bias2 = s::<T>(1.0 - cfg.beta2.powi(t as i32));
        let (b1, b2) = (s::<T>(cfg.beta1), s::<T>(cfg.beta2));
        let (eps, wd) = (s::<T>(cfg.eps), s::<T>(cfg.weight_decay));

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().map(|g| g.data());
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]) + wd * *pj;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let denom = (v[j] / bias2).sqrt() + eps;
                *pj -= grad_coef * gj / denom + mom_coef * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        let cfg = NAdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = NAdam::<f64>::new(cfg, &[&[2]]);
        let mut p = vec![Tensor::from_f64(&[2], &[0.3, -1.2]).unwrap()];
        opt.step(&mut p, &[Some(Tensor::zeros(&[2]))]).unwrap();
        opt.step(&mut p, &[None]).unwrap();
        assert_eq!(p[0].data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_matches_hand_trace() {
        // t = 1, g = 1, m₀ = v₀ = 0, lr = 3e-4, β₁ = 0.9, β₂ = 0.999, ψ = 0.004:
        //   μ₁ = 0.9·(1 − ½·0.96^0.004), μ₂ = 0.9·(1 − ½·0.96^0.008)
        //   m₁ = 0.1, v₁ = 0.001, v̂ = v₁ / 0.001 = 1, denom = 1 + 1e-8
        //   Δ = lr·(1 − μ₁)/(1 − μ₁)·1/denom + lr·μ₂/(1 − μ₁μ₂)·0.1/denom
        let mu1 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.004));
        let mu2 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.008));
        let denom = 1.0 + 1e-8;
        let delta = 3e-4 / denom + 3e-4 * mu2 / (1.0 - mu1 * mu2) * 0.1 / denom;
        let cfg = NAdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = NAdam::<f64>::new(cfg, &[&[]]);
        let mut p = vec![Tensor::scalar(0.5)];
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!((p[0].item() - (0.5 - delta)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let cfg = NAdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = NAdam::<f64>::new(cfg, &[&[]]);
        let mut w = vec![Tensor::scalar(1.0)];
        let mut prev = f64::INFINITY;
        for step in 0..500 {
            let x = w[0].item();
            let f = x * x;
            if step >= 5 {
                assert!(f < prev, "step {step}: {f} !< {prev}");
            }
            prev = f;
            opt.step(&mut w, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(w[0].item().abs() < 1.0);
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let mut opt = NAdam::<f32>::new(NAdamConfig::default(), &[]);
        opt.end_epoch();
        opt.end_epoch();
        assert!((opt.effective_lr() - 3e-4 * 0.98 * 0.98).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = NAdam::<f64>::new(NAdamConfig::default(), &[&[2]]);
        let mut p = vec![Tensor::zeros(&[3])];
        assert!(opt.step(&mut p, &[None]).is_err());
    }
}
