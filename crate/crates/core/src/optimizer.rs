use mf_autodiff::NdArray;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, weight_decay: f64, params: &[NdArray]) -> Self {
        Self {
            cfg,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [NdArray], grads: &[NdArray], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} arrays, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    what: "gradient",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps) + self.weight_decay * *w;
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_and_decay_leave_params_identical() {
        let mut p = vec![NdArray::row(vec![0.1, -3.0, 7.25])];
        let before = p.clone();
        let mut opt = AdamW::new(AdamConfig::default(), 0.0, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[NdArray::row(vec![1.0, -2.0, 0.5])], 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![NdArray::row(vec![1.0, 1.0])];
        let mut opt = AdamW::new(AdamConfig::default(), 0.0, &p);
        opt.step(&mut p, &[NdArray::row(vec![4.0, -0.01])], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = vec![NdArray::row(vec![2.0])];
        let mut opt = AdamW::new(AdamConfig::default(), 0.5, &p);
        opt.step(&mut p, &[NdArray::row(vec![0.0])], 0.1).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![NdArray::row(vec![3.0, -2.0])];
        let mut opt = AdamW::new(AdamConfig::default(), 0.0, &p);
        for _ in 0..2000 {
            let g = p[0].scaled(2.0);
            opt.step(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p[0].norm() < 1e-2);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = vec![NdArray::row(vec![1.0, 2.0])];
        let mut opt = AdamW::new(AdamConfig::default(), 0.0, &p);
        assert!(opt.step(&mut p, &[NdArray::row(vec![1.0])], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }
}
