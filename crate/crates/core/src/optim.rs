//! Adam with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return domain("invalid Adam hyperparameters");
        }
        Ok(Self {
            cfg,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        })
    }

    /// Restore from saved moments.
    pub fn from_state(cfg: AdamConfig, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Shape("moment vectors differ in length".into()));
        }
        let mut a = Self::new(cfg, m.len())?;
        a.step = step;
        a.m = m;
        a.v = v;
        Ok(a)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Learning rate used for the update numbered `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.cfg.warmup as u64;
        if w > 0 && step < w {
            self.cfg.lr * step as f64 / w as f64
        } else {
            self.cfg.lr
        }
    }

    /// One update. A non-finite gradient is rejected before any state changes.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape("parameter/gradient length mismatch".into()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr_at(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[2.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let a = Adam::new(
            AdamConfig {
                lr: 1.0,
                warmup: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(a.lr_at(1), 0.25);
        assert_eq!(a.lr_at(3), 0.75);
        assert_eq!(a.lr_at(4), 1.0);
        assert_eq!(a.lr_at(100), 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 4.0 * (p[1] + 0.5)];
            a.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_nan_without_mutation() {
        let mut a = Adam::new(AdamConfig::default(), 2).unwrap();
        let mut p = vec![1.0, 2.0];
        assert!(a.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(a.steps(), 0);
    }
}
