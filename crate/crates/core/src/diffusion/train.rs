use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{training_loss, LossConfig, LossInput, Stage};
use super::model::{Model, ModelConfig};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::layout::Layout;
use crate::numerics::{AdamW, AdamWConfig, Graph, NumericsError, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    /// Probability of replacing a stage-2 condition with the null condition.
    pub dropout: f64,
    pub loss: LossConfig,
    /// Global optimizer steps between checkpoints; 0 disables periodic ones.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            stage1_steps: 2000,
            stage2_steps: 4000,
            lr_stage1: 1e-4,
            lr_stage2: 5e-5,
            lr_min: 0.0,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            batch_size: 8,
            accumulation: 4,
            dropout: 0.1,
            loss: LossConfig::default(),
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("no training steps configured".into()));
        }
        Ok(())
    }

    fn stage_at(&self, step: u64) -> (Stage, u64) {
        if step < self.stage1_steps {
            (Stage::LayoutFree, step)
        } else {
            (Stage::LayoutGuided, step - self.stage1_steps)
        }
    }

    fn optimizer_config(&self, stage: Stage) -> AdamWConfig {
        let (lr, steps) = match stage {
            Stage::LayoutFree => (self.lr_stage1, self.stage1_steps),
            Stage::LayoutGuided => (self.lr_stage2, self.stage2_steps),
        };
        AdamWConfig {
            lr_peak: lr,
            lr_min: self.lr_min,
            warmup_steps: self.warmup_steps.min(steps),
            total_steps: steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Image in [-1, 1] (C×H×W) with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub layout: Layout,
}

/// Random draws for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub t: usize,
    pub eps: Tensor,
    pub drop: bool,
}

/// Draws for every example of optimizer step `step`; depends only on
/// (seed, step), so a resumed run sees the same data.
pub fn step_draws(cfg: &TrainConfig, step: u64, n_data: usize, shape: &[usize]) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let numel: usize = shape.iter().product();
    (0..cfg.effective_batch())
        .map(|_| {
            let index = rng.gen_range(0..n_data);
            let t = rng.gen_range(0..cfg.schedule.t_train);
            let eps = Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.sample(StandardNormal)).collect())
                .expect("shape matches");
            let drop = rng.gen::<f64>() < cfg.dropout;
            Draw { index, t, eps, drop }
        })
        .collect()
}

/// Adds `factor`·∇loss of every draw into the parameter gradients, one
/// example at a time; returns the summed loss.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients(
    model: &mut Model,
    schedule: &NoiseSchedule,
    stage: Stage,
    loss_cfg: &LossConfig,
    data: &[TrainSample],
    draws: &[Draw],
    factor: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        let sample = data
            .get(d.index)
            .ok_or_else(|| Error::Config(format!("draw index {} outside {} samples", d.index, data.len())))?;
        let grads = {
            let mut g = Graph::new(&model.store);
            let input = LossInput { image: &sample.image, layout: &sample.layout, t: d.t, eps: &d.eps, drop: d.drop };
            let out = training_loss(&mut g, model, schedule, stage, &input, loss_cfg)?;
            let value = g.value(out.loss).data()[0];
            if !value.is_finite() {
                return Err(NumericsError::NonFinite { kernel: "loss" }.into());
            }
            total += value;
            g.backward(out.loss)?
        };
        grads.accumulate_scaled_into(&mut model.store, factor);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based global optimizer step.
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many global steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps_done: u64,
    pub log: Vec<StepLog>,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn save_state(model: &Model, opt: &AdamW, cfg: &TrainConfig, steps_done: u64, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut extra: Vec<(String, &Tensor)> = Vec::with_capacity(2 * names.len());
    for (i, name) in names.iter().enumerate() {
        extra.push((format!("adamw.m.{name}"), &opt.state.first_moment[i]));
        extra.push((format!("adamw.v.{name}"), &opt.state.second_moment[i]));
    }
    let meta = serde_json::json!({
        "steps_done": steps_done,
        "optimizer_step": opt.state.step,
        "train": cfg,
    });
    model.save(path, &extra, meta)
}

fn restore_optimizer(model: &Model, extra: Vec<(String, Tensor)>, config: AdamWConfig, step: u64) -> Result<AdamW> {
    let mut opt = AdamW::new(config, &model.store);
    opt.state.step = step;
    let index: std::collections::HashMap<String, usize> =
        model.store.iter().enumerate().map(|(i, (_, p))| (p.name.clone(), i)).collect();
    let mut seen = 0;
    for (name, t) in extra {
        let (slot, pname) = if let Some(p) = name.strip_prefix("adamw.m.") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("adamw.v.") {
            (1, p)
        } else {
            continue;
        };
        let i = *index.get(pname).ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {pname}")))?;
        let dst = if slot == 0 { &mut opt.state.first_moment[i] } else { &mut opt.state.second_moment[i] };
        if dst.shape() != t.shape() {
            return Err(Error::Config(format!("optimizer state {name} has shape {:?}", t.shape())));
        }
        *dst = t;
        seen += 1;
    }
    if seen != 2 * model.store.len() {
        return Err(Error::Config(format!("checkpoint holds {seen} optimizer moments, expected {}", 2 * model.store.len())));
    }
    Ok(opt)
}

/// Rewrites the loss log keeping only steps ≤ `keep`.
fn reset_log(path: &Path, keep: u64) -> Result<()> {
    let mut out = String::from("step,stage,loss,lr\n");
    if keep > 0 {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        for line in text.lines().skip(1) {
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step <= keep {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Two-stage training. `on_step` sees every completed optimizer step.
pub fn train(
    cfg: &TrainConfig,
    data: &[TrainSample],
    opts: &TrainOptions,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    cfg.check()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = NoiseSchedule::new(&cfg.schedule)?;
    fs::create_dir_all(&opts.out_dir)?;
    let log_path = opts.out_dir.join(LOSS_LOG);

    let (mut model, mut opt, mut steps_done) = match &opts.resume_from {
        Some(path) => {
            let (model, extra, meta) = Model::load(path)?;
            let saved: TrainConfig = serde_json::from_value(meta["train"].clone())
                .map_err(|e| Error::data(path, format!("training config: {e}")))?;
            if &saved != cfg {
                return Err(Error::data(path, "checkpoint was written with a different training configuration"));
            }
            let steps_done = meta["steps_done"].as_u64().ok_or_else(|| Error::data(path, "missing steps_done"))?;
            let opt_step = meta["optimizer_step"].as_u64().ok_or_else(|| Error::data(path, "missing optimizer_step"))?;
            let stage = cfg.stage_at(steps_done.saturating_sub(1)).0;
            let opt = restore_optimizer(&model, extra, cfg.optimizer_config(stage), opt_step)?;
            (model, opt, steps_done)
        }
        None => {
            if cfg.model.unet.image_size == 0 {
                return Err(Error::Config("image size must be positive".into()));
            }
            let model = Model::new(cfg.model.clone())?;
            let opt = AdamW::new(cfg.optimizer_config(cfg.stage_at(0).0), &model.store);
            (model, opt, 0)
        }
    };
    let shape = model.image_shape();
    for (i, s) in data.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(Error::Config(format!("sample {i} has shape {:?}, model expects {shape:?}", s.image.shape())));
        }
    }
    reset_log(&log_path, steps_done)?;
    let mut log_file = fs::OpenOptions::new().append(true).open(&log_path)?;
    let mut log = Vec::new();
    let total = cfg.total_steps();
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let factor = 1.0 / cfg.effective_batch() as f64;

    while steps_done < end {
        let (stage, in_stage) = cfg.stage_at(steps_done);
        if in_stage == 0 && stage == Stage::LayoutGuided {
            opt = AdamW::new(cfg.optimizer_config(stage), &model.store);
        }
        let draws = step_draws(cfg, steps_done, data.len(), &shape);
        model.store.zero_grad();
        let diverged = Error::Diverged { step: steps_done + 1, stage: stage.number() };
        let loss_sum = match accumulate_gradients(&mut model, &schedule, stage, &cfg.loss, data, &draws, factor) {
            Ok(v) => v,
            Err(Error::Numerics(NumericsError::NonFinite { .. })) => return Err(diverged),
            Err(e) => return Err(e),
        };
        let lr = opt.step(&mut model.store)?;
        if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Diverged { step: steps_done + 1, stage: stage.number() });
        }
        steps_done += 1;
        let entry = StepLog { step: steps_done, stage: stage.number(), loss: loss_sum * factor, lr };
        writeln!(log_file, "{},{},{},{}", entry.step, entry.stage, entry.loss, entry.lr)?;
        on_step(&entry);
        log.push(entry);
        if cfg.checkpoint_every > 0 && steps_done % cfg.checkpoint_every == 0 && steps_done < end {
            save_state(&model, &opt, cfg, steps_done, &checkpoint_path(&opts.out_dir, steps_done))?;
        }
    }
    let checkpoint = if steps_done == total {
        opts.out_dir.join(FINAL_CHECKPOINT)
    } else {
        checkpoint_path(&opts.out_dir, steps_done)
    };
    save_state(&model, &opt, cfg, steps_done, &checkpoint)?;
    Ok(TrainSummary { checkpoint, steps_done, log })
}

/// Reads a `step,stage,loss,lr` log.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::data(path, format!("line {}: malformed record {line:?}", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(StepLog {
            step: f[0].parse().map_err(|_| bad())?,
            stage: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            lr: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
