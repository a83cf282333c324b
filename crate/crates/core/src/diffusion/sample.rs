use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{Cond, Model};
use super::schedule::NoiseSchedule;
use crate::conditioning::AlphaPreset;
use crate::layout::{Layout, TaskId};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// The negative prediction is the unconditional one.
    #[default]
    Null,
    /// Same layout and caption with the task swapped for a different one.
    NonTargetTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub negative_mode: NegativeMode,
    pub alpha_preset: AlphaPreset,
    /// Clamp each intermediate x0 estimate to [-1, 1] and re-derive ε from it.
    pub clip_denoised: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            guidance_scale: 5.5,
            negative_mode: NegativeMode::Null,
            alpha_preset: AlphaPreset::Training,
            clip_denoised: true,
            seed: 0,
        }
    }
}

/// Guidance scale of the enhanced-layout mode.
pub const ENHANCED_LAYOUT_SCALE: f64 = 3.0;

impl SampleConfig {
    pub fn check(&self, t_train: usize) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > t_train {
            return Err(Error::Config(format!("ddim_steps {} outside 1..={t_train}", self.ddim_steps)));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance scale {} must be finite and >= 0", self.guidance_scale)));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps, descending: (k−1)·T/k, …, T/k, 0.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps).map(|i| i * t_train / steps).collect();
    ts.reverse();
    ts
}

/// Deterministic DDIM (η = 0) from `x_t` at the first of `timesteps` down to x0.
/// `eps` returns the noise prediction at (x, t). With `clip`, every x0
/// estimate is clamped to [-clip, clip] and ε is recomputed to match it.
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    mut x: Tensor,
    clip: Option<f64>,
    eps: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match timesteps.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let e = eps(&x, t)?;
        if e.shape() != x.shape() {
            return Err(Error::Config(format!("noise prediction {:?} for state {:?}", e.shape(), x.shape())));
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, &ev) in x.data_mut().iter_mut().zip(e.data()) {
            let mut x0 = (*xv - sb * ev) / sa;
            let mut ev = ev;
            if let Some(c) = clip {
                x0 = x0.clamp(-c, c);
                ev = (*xv - sa * x0) / sb;
            }
            *xv = pa * x0 + pb * ev;
        }
    }
    Ok(x)
}

/// Initial state x_T for `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

/// Task used as the negative condition: a different task drawn from `seed`.
pub fn non_target_task(task: TaskId, seed: u64) -> TaskId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6761_7469_7665);
    let others: Vec<TaskId> = TaskId::ALL.into_iter().filter(|&t| t != task).collect();
    others[rng.gen_range(0..others.len())]
}

/// Guided sample for `layout`, clamped to [-1, 1].
///
/// ε = ε(∅) + s·(ε(c) − ε(c_non)). With the null negative, s = 1 collapses to
/// ε(c) and s = 0 to ε(∅), and those cases skip the unused predictions.
pub fn ddim_sample(model: &Model, schedule: &NoiseSchedule, layout: &Layout, cfg: &SampleConfig) -> Result<Tensor> {
    cfg.check(schedule.t_train())?;
    let alphas = cfg.alpha_preset.weights(layout.task, &model.encoder.cfg);
    let cond = Cond::Layout { layout, alphas };
    let negative_layout = match cfg.negative_mode {
        NegativeMode::Null => None,
        NegativeMode::NonTargetTask => {
            let mut l = layout.clone();
            l.task = non_target_task(layout.task, cfg.seed);
            Some(l)
        }
    };
    let s = cfg.guidance_scale;
    let mut eps = |x: &Tensor, t: usize| -> Result<Tensor> {
        match &negative_layout {
            None if s == 0.0 => model.predict(x, t, Cond::Null),
            None if s == 1.0 => model.predict(x, t, cond),
            None => {
                let u = model.predict(x, t, Cond::Null)?;
                let c = model.predict(x, t, cond)?;
                Ok(combine(&u, &c, &u, s))
            }
            Some(neg) => {
                let u = model.predict(x, t, Cond::Null)?;
                if s == 0.0 {
                    return Ok(u);
                }
                let c = model.predict(x, t, cond)?;
                let n = model.predict(x, t, Cond::Layout { layout: neg, alphas })?;
                Ok(combine(&u, &c, &n, s))
            }
        }
    };
    let x = initial_noise(&model.image_shape(), cfg.seed);
    let timesteps = ddim_timesteps(schedule.t_train(), cfg.ddim_steps);
    let clip = cfg.clip_denoised.then_some(1.0);
    let mut out = ddim_loop(schedule, &timesteps, x, clip, &mut eps)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(out)
}

fn combine(uncond: &Tensor, cond: &Tensor, negative: &Tensor, s: f64) -> Tensor {
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .zip(negative.data())
        .map(|((u, c), n)| u + s * (c - n))
        .collect();
    Tensor::new(uncond.shape().to_vec(), data).expect("shapes match")
}

/// [-1, 1] C×H×W tensor to 8-bit interleaved pixels.
pub fn to_pixels(x: &Tensor) -> Vec<u8> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0u8; c * h * w];
    for ci in 0..c {
        for p in 0..h * w {
            let v = x.data()[ci * h * w + p].clamp(-1.0, 1.0);
            out[p * c + ci] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    out
}

/// Inverse of `to_pixels` for interleaved 8-bit data.
pub fn from_pixels(pixels: &[u8], channels: usize, height: usize, width: usize) -> Result<Tensor> {
    if pixels.len() != channels * height * width {
        return Err(Error::Config(format!("{} bytes for a {channels}×{height}×{width} image", pixels.len())));
    }
    let mut data = vec![0.0; pixels.len()];
    for ci in 0..channels {
        for p in 0..height * width {
            data[ci * height * width + p] = pixels[p * channels + ci] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new(vec![channels, height, width], data)?)
}
