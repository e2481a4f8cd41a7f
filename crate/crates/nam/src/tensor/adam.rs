use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> Default for AdamConfig<S> {
    fn default() -> Self {
        Self {
            lr: S::from_f64(1e-3).unwrap(),
            beta1: S::from_f64(0.9).unwrap(),
            beta2: S::from_f64(0.999).unwrap(),
            eps: S::from_f64(1e-8).unwrap(),
        }
    }
}

/// Adam optimizer state: first/second moment buffers per parameter plus the
/// shared step counter.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig<S>,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig<S>, param_sizes: &[usize]) -> Result<Self> {
        if cfg.lr <= S::zero() {
            return Err(TensorError::InvalidHyper(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        Ok(Self {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. The step is rejected as a whole if
    /// any gradient is non-finite, leaving parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for (idx, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite {
                    what: format!("gradient of parameter {idx}"),
                });
            }
        }
        self.step += 1;
        let t = S::from_u64(self.step).unwrap();
        let c = self.cfg;
        let bias1 = S::one() - c.beta1.powf(t);
        let bias2 = S::one() - c.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (S::one() - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (S::one() - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let d = p.data_mut();
                d[i] = d[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: S) {
    let total: S = grads
        .iter()
        .map(|g| g.iter().map(|&x| x * x).sum::<S>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0_f64, -2.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &[2]).unwrap();
        adam.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) ~= lr
        let mut p = Tensor::scalar(1.0_f64);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &[1]).unwrap();
        adam.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_grad_rejects_whole_step() {
        let mut p = Tensor::vector(vec![1.0_f64, 2.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &[2]).unwrap();
        let err = adam
            .step(&mut [&mut p], &[vec![0.5, f64::NAN]])
            .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = Tensor::vector(vec![0.5_f32, -0.25, 3.0]);
            let mut adam = Adam::new(AdamConfig::default(), &[3]).unwrap();
            for i in 0..10 {
                let g: Vec<f32> = (0..3).map(|j| ((i * 3 + j) as f32).sin()).collect();
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = AdamConfig::<f64> {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg, &[1]).is_err());
    }
}
