use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            lr_min: 0.0,
            warmup_steps: 1000,
            total_steps: 50_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Linear warmup to `lr_peak`, then half-cosine decay to `lr_min` at `total_steps`.
pub fn cosine_lr(cfg: &AdamWConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - cfg.warmup_steps).min(span) as f64 / span as f64;
    cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, first_moment: zeros(), second_moment: zeros(), config }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self { state: OptimState::new(config, store) }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.state.config, self.state.step)
    }

    /// Applies one update from the gradients in `store` and returns the
    /// learning rate that was used.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let st = &mut self.state;
        if st.step >= st.config.total_steps {
            return Err(NumericsError::Shape(format!(
                "adamw: step {} is past the schedule end {}",
                st.step, st.config.total_steps
            )));
        }
        if st.first_moment.len() != store.len() {
            return Err(NumericsError::Shape(format!(
                "adamw: state tracks {} parameters, store has {}",
                st.first_moment.len(),
                store.len()
            )));
        }
        let cfg = &st.config;
        let lr = cosine_lr(cfg, st.step);
        let t = (st.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut st.first_moment).zip(&mut st.second_moment) {
            if m.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    kernel: "adamw",
                    lhs: p.value.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let w = p.value.data_mut();
            for i in 0..w.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
            }
        }
        st.step += 1;
        Ok(lr)
    }
}
