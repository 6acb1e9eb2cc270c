use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update at learning rate `lr`; `decay[i]` selects which parameters
    /// receive weight decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&[T]],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first_moment.len()
            || grads.len() != params.len()
            || decay.len() != params.len()
        {
            return Err(Error::Shape(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first_moment[i].shape() || p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "adamw: parameter {i} shape {:?} vs moment {:?} / grad {}",
                    p.shape(),
                    self.first_moment[i].shape(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let shrink = T::of(lr * c.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let decays = decay[i] && c.weight_decay != 0.0;
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                if decays {
                    *x -= shrink * *x;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64, config: AdamWConfig) -> f64 {
        let mut t = Tensor::scalar(p);
        let mut st = OptimizerState::new(config, &[&t]);
        st.step(&mut [&mut t], &[&[g]], &[true], config.lr).unwrap();
        t.data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        assert_eq!(single(1.234, 0.0, cfg), 1.234);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let p = single(0.0, 1.0, cfg);
        assert!((p - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let p = single(2.0, 0.0, cfg);
        assert!((p - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn step_counter_increases_and_shapes_checked() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        let mut st = OptimizerState::new(AdamWConfig::default(), &[&t]);
        st.step(&mut [&mut t], &[&[0.1; 4]], &[false], 1e-3).unwrap();
        st.step(&mut [&mut t], &[&[0.1; 4]], &[false], 1e-3).unwrap();
        assert_eq!(st.step, 2);
        assert!(st.step(&mut [&mut t], &[&[0.1; 3]], &[false], 1e-3).is_err());
    }
}
