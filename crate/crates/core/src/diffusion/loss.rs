use serde::{Deserialize, Serialize};

use super::model::{Cond, Model};
use super::schedule::NoiseSchedule;
use super::weight::{adaptive_weight, entity_attention_maps, AdaptiveWeightMap};
use crate::layout::{Layout, Mask};
use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Null condition everywhere, plain MSE.
    LayoutFree,
    /// Layout condition with dropout, adaptive per-pixel weights.
    LayoutGuided,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::LayoutFree => 1,
            Stage::LayoutGuided => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Balance between the layout mask and normalized attention.
    pub beta: f64,
    pub floor: f64,
    /// Off: stage 2 uses plain MSE.
    pub adaptive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.5, floor: 0.0, adaptive: true }
    }
}

/// One training example with its sampled timestep, noise and dropout draw.
pub struct LossInput<'a> {
    /// x0 in [-1, 1], C×H×W.
    pub image: &'a Tensor,
    pub layout: &'a Layout,
    pub t: usize,
    pub eps: &'a Tensor,
    pub drop: bool,
}

pub struct LossOutput {
    pub loss: Var,
    pub weights: Option<AdaptiveWeightMap>,
}

/// mean over C×H×W of W[h, w]·(pred − target)²; plain MSE when `weight` is None.
pub fn weighted_mse(g: &mut Graph<'_>, pred: Var, target: Var, weight: Option<&AdaptiveWeightMap>) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let sq = match weight {
        Some(w) => {
            let s = g.shape(sq).to_vec();
            if s.len() != 3 || s[1] != w.height || s[2] != w.width {
                return Err(Error::Config(format!("weight map {}×{} for prediction {s:?}", w.height, w.width)));
            }
            let wt = g.constant(w.to_tensor().reshape(&[1, w.height, w.width])?);
            g.mul(sq, wt)?
        }
        None => sq,
    };
    Ok(g.mean(sq)?)
}

pub fn training_loss(
    g: &mut Graph<'_>,
    model: &Model,
    schedule: &NoiseSchedule,
    stage: Stage,
    input: &LossInput<'_>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let size = model.image_size();
    let xt = schedule.forward_noise(input.image, input.t, input.eps)?;
    let x = g.constant(xt);
    let target = g.constant(input.eps.clone());
    let cond = match stage {
        Stage::LayoutFree => Cond::Null,
        Stage::LayoutGuided if input.drop => Cond::Null,
        Stage::LayoutGuided => {
            let enc = &model.encoder.cfg;
            Cond::Layout { layout: input.layout, alphas: (enc.alpha_box, enc.alpha_mask) }
        }
    };
    let bundle = model.bundle(g, cond)?;
    let out = model.forward(g, x, input.t, &bundle)?;
    let weights = if matches!(cond, Cond::Layout { .. }) && cfg.adaptive {
        let maps = entity_attention_maps(g, &out.attention, bundle.n_entities(), size)?;
        let masks: Vec<Mask> = bundle.entities.iter().map(|e| e.mask.clone()).collect();
        Some(adaptive_weight(size, size, &masks, &maps, cfg.beta, cfg.floor)?)
    } else {
        None
    };
    let loss = weighted_mse(g, out.eps, target, weights.as_ref())?;
    Ok(LossOutput { loss, weights })
}
