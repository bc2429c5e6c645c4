use krt_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("optimizer: lr must be >= 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config("optimizer.eps must be > 0"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, steps: 0, m, v }
    }

    /// One update. `grads[i]` is `None` for parameters that got no gradient;
    /// those keep their value and moments.
    pub fn step<S: Scalar>(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Option<Vec<S>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *x = S::of(x.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            [3],
        );
        adam.step(vec![&mut p], &[Some(vec![4.0, -0.01, 0.0])]).unwrap();
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - -1.9).abs() < 1e-5);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn zero_lr_and_missing_grads_are_no_ops() {
        let mut p = Tensor::<f32>::from_f64([2], &[0.3, 0.7]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            [2],
        );
        adam.step(vec![&mut p], &[Some(vec![1.0, 1.0])]).unwrap();
        assert_eq!(p, before);
        let mut adam = Adam::new(AdamConfig::default(), [2]);
        adam.step(vec![&mut p], &[None]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::from_f64([1], &[3.0]).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            [1],
        );
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 1.0);
            adam.step(vec![&mut p], &[Some(vec![g])]).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }
}
