use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Linear β schedule with cumulative products ᾱ_t = Π_{s≤t}(1 − β_s).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
        let t = cfg.t_train;
        if t == 0 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule {cfg:?}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("timestep {t} outside 0..{}", self.t_train())))
    }

    /// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::Config(format!("x0 {:?} and noise {:?} differ in shape", x0.shape(), eps.shape())));
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }
}
