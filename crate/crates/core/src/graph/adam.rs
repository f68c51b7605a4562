//! Adam optimiser with bias correction.

use super::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
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

/// Per-parameter first/second moment state plus the shared step count.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One update: `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
    /// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`. Missing gradients are
    /// treated as zero. Gradients are cleared afterwards.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "parameter set changed size");
        self.step += 1;
        let t = self.step as i32;
        let b1 = lit::<T>(self.cfg.beta1);
        let b2 = lit::<T>(self.cfg.beta2);
        let one = T::one();
        let lr = lit::<T>(self.cfg.lr);
        let eps = lit::<T>(self.cfg.eps);
        let bc1 = lit::<T>(1.0 - self.cfg.beta1.powi(t));
        let bc2 = lit::<T>(1.0 - self.cfg.beta2.powi(t));

        for (i, p) in params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            drop(data);
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1 on the first step, m_hat = 1 and v_hat = 1, so the
        // update is lr / (1 + eps).
        let p: Tensor<f64> = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]);
        p.accumulate_grad(|g| g.iter_mut().for_each(|v| *v = 1.0));
        let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p));
        let data = p.to_vec();
        let expected_delta = 1e-3 / (1.0 + 1e-8);
        assert!((data[0] - (1.0 - expected_delta)).abs() < 1e-12);
        assert!((data[1] - (-2.0 - expected_delta)).abs() < 1e-12);
        assert!(p.grad().is_none(), "step clears gradients");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p: Tensor<f64> = Tensor::param(vec![2], vec![4.0, -1.0]);
        let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p));
        assert_eq!(p.to_vec(), vec![4.0, -1.0]);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(theta) = theta^2, the gradient is 2 theta.
        let p: Tensor<f64> = Tensor::param(vec![1], vec![1.0]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            std::slice::from_ref(&p),
        );
        for _ in 0..200 {
            let theta = p.to_vec()[0];
            p.accumulate_grad(|g| g[0] = 2.0 * theta);
            opt.step(std::slice::from_ref(&p));
        }
        assert!(p.to_vec()[0].abs() < 0.01, "got {}", p.to_vec()[0]);
    }
}
