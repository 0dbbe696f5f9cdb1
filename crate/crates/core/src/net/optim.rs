use super::ModelParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate tuned for long multi-accelerator runs.
    pub fn large_scale() -> Self {
        AdamWConfig {
            lr: 2e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    /// Applies one update; non-finite gradients leave everything untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.tensors.len() || self.m.len() != grads.len() {
            return Err(Error::shape("gradient list does not match parameters"));
        }
        for ((g, p), n) in grads.iter().zip(&params.tensors).zip(&params.names) {
            if g.shape != p.shape {
                return Err(Error::shape(format!("gradient of {n} has shape {:?}", g.shape)));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {n}; step skipped")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.tensors[i].data.iter_mut().enumerate() {
                let gj = g.data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let upd = mhat / (vhat.sqrt() + c.eps as f64) + c.weight_decay as f64 * *p as f64;
                *p = (*p as f64 - c.lr as f64 * upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn scalar_params(v: f32) -> ModelParams {
        ModelParams {
            config: NetConfig::new(1, 0, 0),
            seed: 0,
            names: vec!["p".into()],
            tensors: vec![Tensor::new(vec![1], vec![v]).unwrap()],
        }
    }

    #[test]
    fn hand_evaluated_step() {
        let mut p = scalar_params(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Tensor::new(vec![1], vec![1.0]).unwrap()]).unwrap();
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = scalar_params(0.7);
        let mut opt = AdamW::new(AdamWConfig::default(), &p).unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::zeros(vec![1])]).unwrap();
        }
        assert_eq!(p.tensors[0].data[0], 0.7);
    }

    #[test]
    fn decoupled_decay_and_nonfinite_abort() {
        let mut p = scalar_params(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Tensor::zeros(vec![1])]).unwrap();
        assert!((p.tensors[0].data[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
        let before = p.clone();
        let err = opt.step(&mut p, &[Tensor::new(vec![1], vec![f32::NAN]).unwrap()]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn large_scale_preset() {
        let c = AdamWConfig::large_scale();
        assert_eq!(c.lr, 2e-6);
        assert!(c.validate().is_ok());
    }
}
