//! Adam with bias correction.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments of parameters whose gradient stays zero decay geometrically into
/// the subnormal range, where arithmetic is orders of magnitude slower; their
/// contribution to θ is far below its precision, so they are zeroed instead.
#[inline]
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Per-parameter moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `m ← β1 m + (1−β1) g`, `v ← β2 v + (1−β2) g²`,
    /// `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: vec![self.m.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = flush(beta1 * *mj + (1.0 - beta1) * gj);
                *vj = flush(beta2 * *vj + (1.0 - beta2) * gj * gj);
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = Tensor::from_vec(vec![0.3, -0.7, 2.0]);
        let lr = 1e-3;
        let mut st = AdamState::new(AdamConfig::with_lr(lr), &[&p]);
        let before = p.clone();
        st.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for ((a, b), gv) in p.data().iter().zip(before.data()).zip(g.data()) {
            let expected = -lr * gv.signum();
            assert!(((a - b) - expected).abs() < lr * 1e-6);
        }
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * p.item());
            st.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.item().abs() < 0.1, "{}", p.item());
    }

    #[test]
    fn decayed_moments_never_go_subnormal() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), &[&p]);
        st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5])]).unwrap();
        for _ in 0..10_000 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[1])]).unwrap();
            assert!(!st.m[0][0].is_subnormal() && !st.v[0][0].is_subnormal());
        }
        assert_eq!(st.m[0][0], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }
}
