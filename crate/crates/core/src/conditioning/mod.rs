//! Layout encoder: box MLP, mask CNN, cross-attention fusion, per-task FiLM
//! modulation, task and caption tokens, and the learned null condition used
//! for classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{unify_entities, CategoryId, Layout, LayoutEntity, Mask, TaskId, UnifiedEntity};
use crate::nn::{Conv, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Which layout modality reaches the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutModality {
    BoxOnly,
    MaskOnly,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub fusion_heads: usize,
    pub fusion_key_dim: usize,
    /// Output widths of the four stride-2 mask convolutions; the last equals `dim`.
    pub mask_channels: [usize; 4],
    /// Side of the square grid masks are resampled to before the CNN.
    pub mask_input: usize,
    pub n_categories: usize,
    pub alpha_box: f64,
    pub alpha_mask: f64,
    pub modality: LayoutModality,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            fusion_heads: 4,
            fusion_key_dim: 16,
            mask_channels: [8, 16, 32, 64],
            mask_input: 16,
            n_categories: CategoryId::COUNT,
            alpha_box: 1.0,
            alpha_mask: 1.0,
            modality: LayoutModality::Both,
        }
    }
}

impl EncoderConfig {
    pub fn check(&self) -> Result<()> {
        if self.dim == 0 || self.fusion_heads == 0 || !self.dim.is_multiple_of(self.fusion_heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} fusion heads", self.dim, self.fusion_heads)));
        }
        if self.mask_channels[3] != self.dim {
            return Err(Error::Config(format!("mask channel ladder {:?} must end at {}", self.mask_channels, self.dim)));
        }
        if self.mask_input < 16 || !self.mask_input.is_power_of_two() {
            return Err(Error::Config(format!("mask input {} must be a power of two >= 16", self.mask_input)));
        }
        Ok(())
    }
}

/// Modality mixing weights used inside `fuse`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPreset {
    /// The weights the model was trained with (both 1.0 by default).
    Training,
    /// Box emphasis for detection, mask emphasis for the segmentation tasks.
    TaskAdaptive,
    /// 0.6 / 0.6.
    Balanced,
}

impl AlphaPreset {
    /// (alpha_box, alpha_mask) for `task`.
    pub fn weights(self, task: TaskId, cfg: &EncoderConfig) -> (f64, f64) {
        match self {
            AlphaPreset::Training => (cfg.alpha_box, cfg.alpha_mask),
            AlphaPreset::Balanced => (0.6, 0.6),
            AlphaPreset::TaskAdaptive => match task {
                TaskId::Detection => (0.8, 0.6),
                _ => (0.6, 0.9),
            },
        }
    }
}

/// Condition tokens for one sample, recorded on a graph.
pub struct ConditionBundle {
    /// Surviving unified entities, aligned with `entity_tokens` rows. Empty for the null bundle.
    pub entities: Vec<UnifiedEntity>,
    /// n×D.
    pub entity_tokens: Var,
    /// 1×D.
    pub task_token: Var,
    /// 1×D.
    pub caption_token: Var,
    pub null_flag: bool,
}

impl ConditionBundle {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Token sequence consumed by the injection blocks: entities, then task, then caption.
    pub fn tokens(&self, g: &mut Graph<'_>) -> Result<Var> {
        Ok(g.concat(&[self.entity_tokens, self.task_token, self.caption_token], 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayoutEncoder {
    pub cfg: EncoderConfig,
    cat_embed: ParamId,
    box_in: Linear,
    box_out: Linear,
    mask_convs: [Conv; 4],
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    residual: Linear,
    task_embed: ParamId,
    film_scale: Linear,
    film_shift: Linear,
    caption: Linear,
    null_task: ParamId,
    null_caption: ParamId,
}

impl LayoutEncoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.check()?;
        let d = cfg.dim;
        let hk = cfg.fusion_heads * cfg.fusion_key_dim;
        let cat_embed = store.add_normal("enc.cat_embed", &[cfg.n_categories, d], 1.0, rng)?;
        let box_in = Linear::new(store, "enc.box.0", 4 + d, d, true, 1.0, rng)?;
        let box_out = Linear::new(store, "enc.box.1", d, d, true, 1.0, rng)?;
        let mut ch = 1;
        let mut convs = Vec::with_capacity(4);
        for (i, &out) in cfg.mask_channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("enc.mask.{i}"), ch, out, 3, 2, 1.0, rng)?);
            ch = out;
        }
        let mask_convs = [convs[0], convs[1], convs[2], convs[3]];
        let q = Linear::new(store, "enc.fuse.q", d, hk, false, 1.0, rng)?;
        let k = Linear::new(store, "enc.fuse.k", d, hk, false, 1.0, rng)?;
        let v = Linear::new(store, "enc.fuse.v", d, hk, false, 1.0, rng)?;
        let o = Linear::new(store, "enc.fuse.o", hk, d, false, 1.0, rng)?;
        let residual = Linear::new(store, "enc.fuse.res", d, d, false, 1.0, rng)?;
        let task_embed = store.add_normal("enc.task_embed", &[TaskId::ALL.len(), d], 1.0, rng)?;
        let film_scale = Linear::new(store, "enc.film.scale", d, d, true, 0.1, rng)?;
        let film_shift = Linear::new(store, "enc.film.shift", d, d, true, 0.1, rng)?;
        let caption = Linear::new(store, "enc.caption", cfg.n_categories, d, true, 1.0, rng)?;
        let null_task = store.add_normal("enc.null.task", &[1, d], 1.0, rng)?;
        let null_caption = store.add_normal("enc.null.caption", &[1, d], 1.0, rng)?;
        Ok(Self {
            cfg,
            cat_embed,
            box_in,
            box_out,
            mask_convs,
            q,
            k,
            v,
            o,
            residual,
            task_embed,
            film_scale,
            film_shift,
            caption,
            null_task,
            null_caption,
        })
    }

    /// Box branch: [x1, y1, x2, y2] ++ category embedding through Linear→SiLU→Linear.
    pub fn encode_boxes(&self, g: &mut Graph<'_>, entities: &[UnifiedEntity]) -> Result<Var> {
        let d = self.cfg.dim;
        if let Some(bad) = entities.iter().find(|e| e.category.0 >= self.cfg.n_categories) {
            return Err(Error::Config(format!("category id {} outside the {}-entry table", bad.category.0, self.cfg.n_categories)));
        }
        if entities.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, d])));
        }
        let coords: Vec<f64> = entities.iter().flat_map(|e| e.bbox.to_array()).collect();
        let coords = g.constant(Tensor::new(vec![entities.len(), 4], coords)?);
        let table = g.param(self.cat_embed);
        let ids: Vec<usize> = entities.iter().map(|e| e.category.0).collect();
        let emb = g.embedding(table, &ids)?;
        let x = g.concat(&[coords, emb], 1)?;
        let h = self.box_in.forward(g, x)?;
        let h = g.silu(h)?;
        Ok(self.box_out.forward(g, h)?)
    }

    /// Mask branch: E×E mask through four stride-2 convolutions with SiLU
    /// between them, then adaptive average pooling to one D-vector.
    pub fn encode_masks(&self, g: &mut Graph<'_>, entities: &[UnifiedEntity]) -> Result<Var> {
        let d = self.cfg.dim;
        if entities.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, d])));
        }
        let side = self.cfg.mask_input;
        let mut rows = Vec::with_capacity(entities.len());
        for e in entities {
            let m = e.mask.max_pool(side, side)?;
            let mut h = g.constant(Tensor::new(vec![1, side, side], m.to_f64())?);
            for (i, conv) in self.mask_convs.iter().enumerate() {
                h = conv.forward(g, h)?;
                if i + 1 < self.mask_convs.len() {
                    h = g.silu(h)?;
                }
            }
            let pooled = g.avg_pool(h)?;
            rows.push(g.reshape(pooled, &[1, d])?);
        }
        Ok(g.concat(&rows, 0)?)
    }

    /// E_geo = α_box·B + α_mask·CrossAttn(queries = B, keys/values = M) + R·M.
    pub fn fuse(&self, g: &mut Graph<'_>, box_feats: Var, mask_feats: Var, alpha_box: f64, alpha_mask: f64) -> Result<Var> {
        Ok(self.fuse_with_weights(g, box_feats, mask_feats, alpha_box, alpha_mask)?.0)
    }

    /// `fuse` that also returns the per-head n×n attention weights.
    pub fn fuse_with_weights(
        &self,
        g: &mut Graph<'_>,
        box_feats: Var,
        mask_feats: Var,
        alpha_box: f64,
        alpha_mask: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let (sb, sm) = (g.shape(box_feats).to_vec(), g.shape(mask_feats).to_vec());
        if sb != sm || sb.len() != 2 || sb[1] != self.cfg.dim {
            return Err(Error::Config(format!("fuse: box features {sb:?} vs mask features {sm:?}")));
        }
        if sb[0] == 0 {
            return Ok((box_feats, Vec::new()));
        }
        let dk = self.cfg.fusion_key_dim;
        let q = self.q.forward(g, box_feats)?;
        let k = self.k.forward(g, mask_feats)?;
        let v = self.v.forward(g, mask_feats)?;
        let mut heads = Vec::with_capacity(self.cfg.fusion_heads);
        let mut weights = Vec::with_capacity(self.cfg.fusion_heads);
        for h in 0..self.cfg.fusion_heads {
            let qh = g.narrow(q, 1, h * dk, dk)?;
            let kh = g.narrow(k, 1, h * dk, dk)?;
            let vh = g.narrow(v, 1, h * dk, dk)?;
            let logits = g.matmul_t(qh, kh, false, true)?;
            let logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
            let a = g.softmax(logits, 1)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = g.concat(&heads, 1)?;
        let attn = self.o.forward(g, cat)?;
        let b = g.scale(box_feats, alpha_box)?;
        let a = g.scale(attn, alpha_mask)?;
        let r = self.residual.forward(g, mask_feats)?;
        let out = g.add(b, a)?;
        Ok((g.add(out, r)?, weights))
    }

    /// θ(T): 1×D task token.
    pub fn task_token(&self, g: &mut Graph<'_>, task: TaskId) -> Result<Var> {
        let table = g.param(self.task_embed);
        Ok(g.embedding(table, &[task.index()])?)
    }

    fn caption_token(&self, g: &mut Graph<'_>, layout: &Layout) -> Result<Var> {
        let counts = layout.caption.counts();
        let total: f64 = counts.iter().sum();
        let norm: Vec<f64> = counts.iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect();
        let x = g.constant(Tensor::new(vec![1, norm.len()], norm)?);
        Ok(self.caption.forward(g, x)?)
    }

    /// Applies the modality switch before unification.
    fn prepare_entities(&self, layout: &Layout, grid: usize) -> Vec<UnifiedEntity> {
        let stripped: Vec<LayoutEntity> = layout
            .entities
            .iter()
            .filter_map(|e| {
                let mut e = e.clone();
                match self.cfg.modality {
                    LayoutModality::Both => {}
                    LayoutModality::BoxOnly => {
                        if e.bbox.is_none() {
                            e.bbox = e.mask.as_ref().and_then(Mask::tight_box);
                        }
                        e.mask = None;
                    }
                    LayoutModality::MaskOnly => {
                        if e.mask.is_none() {
                            e.mask = e.bbox.and_then(|b| Mask::rasterize_box(&b, grid, grid).ok());
                        }
                        e.bbox = None;
                    }
                }
                (e.bbox.is_some() || e.mask.is_some()).then_some(e)
            })
            .collect();
        unify_entities(&stripped, grid, grid)
    }

    /// Builds the condition bundle for `layout` on a `grid`×`grid` image.
    /// With `drop`, every token is replaced by the learned null vectors and
    /// no entity tokens remain. A single-modality encoder zeroes the other
    /// branch weight.
    pub fn condition(
        &self,
        g: &mut Graph<'_>,
        layout: &Layout,
        grid: usize,
        drop: bool,
        alphas: (f64, f64),
    ) -> Result<ConditionBundle> {
        let d = self.cfg.dim;
        if drop {
            return self.null_bundle(g);
        }
        let entities = self.prepare_entities(layout, grid);
        let task_token = self.task_token(g, layout.task)?;
        let caption_token = self.caption_token(g, layout)?;
        let entity_tokens = if entities.is_empty() {
            g.constant(Tensor::zeros(&[0, d]))
        } else {
            let b = self.encode_boxes(g, &entities)?;
            let m = self.encode_masks(g, &entities)?;
            let (ab, am) = match self.cfg.modality {
                LayoutModality::Both => alphas,
                LayoutModality::BoxOnly => (alphas.0, 0.0),
                LayoutModality::MaskOnly => (0.0, alphas.1),
            };
            let geo = self.fuse(g, b, m, ab, am)?;
            let scale = self.film_scale.forward(g, task_token)?;
            let shift = self.film_shift.forward(g, task_token)?;
            let one = g.constant(Tensor::ones(&[1, d]));
            let scale = g.add(scale, one)?;
            let modulated = g.mul(geo, scale)?;
            g.add(modulated, shift)?
        };
        Ok(ConditionBundle { entities, entity_tokens, task_token, caption_token, null_flag: false })
    }

    pub fn null_bundle(&self, g: &mut Graph<'_>) -> Result<ConditionBundle> {
        let entity_tokens = g.constant(Tensor::zeros(&[0, self.cfg.dim]));
        let task_token = g.param(self.null_task);
        let caption_token = g.param(self.null_caption);
        Ok(ConditionBundle { entities: Vec::new(), entity_tokens, task_token, caption_token, null_flag: true })
    }
}
