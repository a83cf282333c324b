//! Small U-Net noise predictor with masked cross-attention layout injection
//! at several resolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::layout::{Mask, UnifiedEntity};
use crate::nn::{Conv, GroupNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Logit bias applied to blocked image-token/condition-token pairs in additive mode.
pub const BLOCKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Every configured resolution, on both the encoder and decoder paths.
    AllLevels,
    /// Only the two coarsest configured resolutions.
    #[default]
    CoarseTwo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Blocked logits receive a -1e9 bias before the softmax.
    #[default]
    Additive,
    /// Logits are multiplied elementwise by the binary mask.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Per-level width multipliers; the number of entries is the number of
    /// down (and up) blocks.
    pub channel_mults: Vec<usize>,
    /// Mask-pyramid resolutions, finest first.
    pub injection_resolutions: Vec<usize>,
    pub injection_mode: InjectionMode,
    pub mask_mode: MaskMode,
    /// Width of the condition tokens fed to injection.
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Adds a residual conv+norm+SiLU after each block's main conv.
    pub refine: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2, 2],
            injection_resolutions: vec![16, 8, 4],
            injection_mode: InjectionMode::CoarseTwo,
            mask_mode: MaskMode::Additive,
            cond_dim: 64,
            time_dim: 64,
            refine: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn check(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(1 << levels) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{levels} for {levels} down-sampling blocks",
                self.image_size
            )));
        }
        if self.injection_resolutions.is_empty() {
            return Err(Error::Config("at least one injection resolution is required".into()));
        }
        for &r in &self.injection_resolutions {
            if r == 0 || !self.image_size.is_multiple_of(r) || !(self.image_size / r).is_power_of_two() || r == self.image_size {
                return Err(Error::Config(format!(
                    "injection resolution {r} must be a power-of-two fraction of {} reached by a down block",
                    self.image_size
                )));
            }
            if self.image_size / r > 1 << levels {
                return Err(Error::Config(format!("injection resolution {r} is coarser than the bottleneck")));
            }
        }
        if self.base_channels == 0 || !self.time_dim.is_multiple_of(2) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive and time_dim even".into()));
        }
        Ok(())
    }

    /// Resolutions at which injection blocks run.
    pub fn active_resolutions(&self) -> Vec<usize> {
        let mut r = self.injection_resolutions.clone();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r.dedup();
        match self.injection_mode {
            InjectionMode::AllLevels => r,
            InjectionMode::CoarseTwo => r.split_off(r.len().saturating_sub(2)),
        }
    }

    fn width(&self, level: Option<usize>) -> usize {
        level.map_or(self.base_channels, |l| self.base_channels * self.channel_mults[l])
    }
}

/// Per-scale binary matrices of shape (H_ℓ·W_ℓ)×(n+2): entity columns then
/// the always-visible task and caption columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub resolutions: Vec<usize>,
    /// `masks[k][i]` is entity `i` pooled to `resolutions[k]`.
    pub masks: Vec<Vec<Mask>>,
    pub n_entities: usize,
}

impl MaskPyramid {
    pub fn build(entities: &[UnifiedEntity], resolutions: &[usize]) -> Result<MaskPyramid> {
        let mut masks = Vec::with_capacity(resolutions.len());
        for &r in resolutions {
            let per: Result<Vec<Mask>> = entities.iter().map(|e| Ok(e.mask.max_pool(r, r)?)).collect();
            masks.push(per?);
        }
        Ok(MaskPyramid { resolutions: resolutions.to_vec(), masks, n_entities: entities.len() })
    }

    pub fn n_scales(&self) -> usize {
        self.resolutions.len()
    }

    /// M_k resampled (nearest) to a `grid`×`grid` query map, as (grid²)×(n+2).
    pub fn matrix(&self, k: usize, grid: usize) -> Result<Tensor> {
        let n = self.n_entities;
        let cols = n + 2;
        let mut data = vec![0.0; grid * grid * cols];
        for (i, m) in self.masks[k].iter().enumerate() {
            let m = m.resize_nearest(grid, grid)?;
            for (p, &b) in m.bits().iter().enumerate() {
                if b {
                    data[p * cols + i] = 1.0;
                }
            }
        }
        for p in 0..grid * grid {
            data[p * cols + n] = 1.0;
            data[p * cols + n + 1] = 1.0;
        }
        Ok(Tensor::new(vec![grid * grid, cols], data)?)
    }

    /// Pyramid of an entity-free bundle: only the two global columns.
    pub fn empty(resolutions: &[usize]) -> MaskPyramid {
        MaskPyramid { resolutions: resolutions.to_vec(), masks: vec![Vec::new(); resolutions.len()], n_entities: 0 }
    }
}

/// Softmax-parameterized mixing weights over mask scales.
#[derive(Clone, Copy, Debug)]
pub struct ScaleWeights {
    pub logits: ParamId,
}

impl ScaleWeights {
    /// Logits whose softmax is exactly (0.1, 0.3, 0.6) in f64.
    pub fn initial_logits() -> [f64; 3] {
        [(1.0f64 / 6.0).ln(), 0.5f64.ln(), 0.0]
    }

    pub fn new(store: &mut ParamStore, name: &str, k: usize) -> Result<ScaleWeights> {
        let init = if k == 3 { Self::initial_logits().to_vec() } else { vec![0.0; k] };
        Ok(ScaleWeights { logits: store.add(name, Tensor::new(vec![k], init)?)? })
    }

    pub fn alphas(&self, g: &mut Graph<'_>) -> Result<Var> {
        let l = g.param(self.logits);
        Ok(g.softmax(l, 0)?)
    }

    pub fn values(&self, store: &ParamStore) -> Vec<f64> {
        let l = store.get(self.logits).value.data();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }
}

/// Output of `masked_cross_attention`.
pub struct AttentionOutput {
    /// T×d.
    pub out: Var,
    /// α-weighted attention matrix Σ_k α_k·A_k, T×(n+2).
    pub weights: Var,
    /// Per-scale attention matrices.
    pub per_scale: Vec<Var>,
}

/// Σ_k α_k · softmax(mask_k(QKᵀ/√d)) V.
///
/// `masks[k]` is T×(n+2); `alphas` is a length-K vector.
pub fn masked_cross_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    masks: &[Tensor],
    alphas: Var,
    mode: MaskMode,
) -> Result<AttentionOutput> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Config(format!("attention head dims differ: queries {sq:?}, keys {sk:?}")));
    }
    if g.shape(alphas) != [masks.len()] {
        return Err(Error::Config(format!("{} scale weights for {} masks", g.shape(alphas)[0], masks.len())));
    }
    let logits = g.matmul_t(q, k, false, true)?;
    let logits = g.scale(logits, 1.0 / (sq[1] as f64).sqrt())?;
    let mut per_scale = Vec::with_capacity(masks.len());
    let mut mixed: Option<Var> = None;
    for (i, m) in masks.iter().enumerate() {
        if m.shape() != [sq[0], sk[0]] {
            return Err(Error::Config(format!("mask {:?} does not match {}×{} attention", m.shape(), sq[0], sk[0])));
        }
        let masked = match mode {
            MaskMode::Additive => {
                let bias: Vec<f64> = m.data().iter().map(|&b| if b > 0.5 { 0.0 } else { BLOCKED_LOGIT }).collect();
                let bias = g.constant(Tensor::new(m.shape().to_vec(), bias)?);
                g.add(logits, bias)?
            }
            MaskMode::Multiplicative => {
                let mc = g.constant(m.clone());
                g.mul(logits, mc)?
            }
        };
        let a = g.softmax(masked, 1)?;
        per_scale.push(a);
        let ak = g.narrow(alphas, 0, i, 1)?;
        let term = g.mul(a, ak)?;
        mixed = Some(match mixed {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let weights = mixed.ok_or_else(|| Error::Config("no mask scales".into()))?;
    let out = g.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights, per_scale })
}

#[derive(Clone, Debug)]
struct Injector {
    resolution: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    norm: GroupNorm,
    time: Linear,
    refine: Option<(Conv, GroupNorm)>,
    inject: Option<Injector>,
}

/// Attention recorded at one injection site.
pub struct SiteAttention {
    pub resolution: usize,
    /// (res²)×(n+2) mixed attention weights.
    pub weights: Var,
}

pub struct UNetOutput {
    pub eps: Var,
    pub attention: Vec<SiteAttention>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub scale_weights: ScaleWeights,
    stem: Conv,
    time_in: Linear,
    time_out: Linear,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    out_norm: GroupNorm,
    head: Conv,
    /// Per-resolution projection of the shared bundle tokens (h^(ℓ)).
    token_proj: Vec<(usize, Linear)>,
    /// Per-channel bias on ε, a(t)·mean(x) + b(t). Group norms strip
    /// absolute colour offsets, which the predictor needs at high noise levels.
    global: (Linear, Linear),
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Sinusoidal embedding of timestep `t` with `dim` entries (sines then cosines).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl UNet {
    pub fn new<R: Rng>(cfg: UNetConfig, store: &mut ParamStore, rng: &mut R) -> Result<UNet> {
        cfg.check()?;
        let levels = cfg.levels();
        let active = cfg.active_resolutions();
        let td = cfg.time_dim;
        let stem = Conv::new(store, "unet.stem", cfg.in_channels, cfg.base_channels, 3, 1, 1.0, rng)?;
        let time_in = Linear::new(store, "unet.time.0", td, td, true, 1.0, rng)?;
        let time_out = Linear::new(store, "unet.time.1", td, td, true, 1.0, rng)?;
        let mut token_proj = Vec::new();
        for &r in &active {
            token_proj.push((r, Linear::new(store, &format!("unet.tokens.r{r}"), cfg.cond_dim, cfg.cond_dim, false, 1.0, rng)?));
        }
        let mut make_block = |store: &mut ParamStore, name: String, cin: usize, cout: usize, stride: usize, res: usize| -> Result<Block> {
            let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1.0, rng)?;
            let norm = GroupNorm::new(store, &format!("{name}.norm"), cout, groups_for(cout))?;
            let time = Linear::new(store, &format!("{name}.time"), td, cout, true, 1.0, rng)?;
            let refine = if cfg.refine {
                let c = Conv::new(store, &format!("{name}.refine.conv"), cout, cout, 3, 1, 1.0, rng)?;
                Some((c, GroupNorm::new(store, &format!("{name}.refine.norm"), cout, groups_for(cout))?))
            } else {
                None
            };
            let inject = if active.contains(&res) {
                let d = cfg.cond_dim;
                Some(Injector {
                    resolution: res,
                    q: Linear::new(store, &format!("{name}.attn.q"), cout, cout, false, 1.0, rng)?,
                    k: Linear::new(store, &format!("{name}.attn.k"), d, cout, false, 1.0, rng)?,
                    v: Linear::new(store, &format!("{name}.attn.v"), d, cout, false, 1.0, rng)?,
                    o: Linear::new(store, &format!("{name}.attn.o"), cout, cout, false, 0.0, rng)?,
                })
            } else {
                None
            };
            Ok(Block { conv, norm, time, refine, inject })
        };
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let res = cfg.image_size >> (l + 1);
            let cin = cfg.width(l.checked_sub(1));
            down.push(make_block(store, format!("unet.down{l}"), cin, cfg.width(Some(l)), 2, res)?);
        }
        let deepest = cfg.width(Some(levels - 1));
        let mid = make_block(store, "unet.mid".into(), deepest, deepest, 1, 0)?;
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            // Up block l maps level-l features to resolution image_size >> l.
            let res = cfg.image_size >> l;
            let skip = cfg.width(l.checked_sub(1));
            up.push(make_block(store, format!("unet.up{l}"), cfg.width(Some(l)) + skip, skip, 1, res)?);
        }
        let out_norm = GroupNorm::new(store, "unet.out.norm", cfg.base_channels, groups_for(cfg.base_channels))?;
        let head = Conv::new(store, "unet.head", cfg.base_channels, cfg.in_channels, 3, 1, 0.0, rng)?;
        let global = (
            Linear::new(store, "unet.global.scale", td, cfg.in_channels, true, 0.0, rng)?,
            Linear::new(store, "unet.global.shift", td, cfg.in_channels, true, 0.0, rng)?,
        );
        let scale_weights = ScaleWeights::new(store, "unet.scale_logits", cfg.injection_resolutions.len())?;
        Ok(UNet { cfg, scale_weights, stem, time_in, time_out, down, mid, up, out_norm, head, token_proj, global })
    }

    pub fn pyramid(&self, bundle: &ConditionBundle) -> Result<MaskPyramid> {
        MaskPyramid::build(&bundle.entities, &self.cfg.injection_resolutions)
    }

    fn run_block(&self, g: &mut Graph<'_>, b: &Block, x: Var, temb: Var, ctx: &mut InjectCtx) -> Result<Var> {
        let h = b.conv.forward(g, x)?;
        let h = b.norm.forward(g, h)?;
        let h = g.silu(h)?;
        let c = g.shape(h)[0];
        let t = b.time.forward(g, temb)?;
        let t = g.reshape(t, &[c, 1, 1])?;
        let mut h = g.add(h, t)?;
        if let Some((conv, norm)) = &b.refine {
            let r = conv.forward(g, h)?;
            let r = norm.forward(g, r)?;
            let r = g.silu(r)?;
            h = g.add(h, r)?;
        }
        match &b.inject {
            Some(inj) => self.inject(g, inj, h, ctx),
            None => Ok(h),
        }
    }

    fn inject(&self, g: &mut Graph<'_>, inj: &Injector, f: Var, ctx: &mut InjectCtx) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let tokens = match ctx.tokens.iter().find(|(r, _)| *r == inj.resolution) {
            Some(&(_, t)) => t,
            None => {
                let proj = self
                    .token_proj
                    .iter()
                    .find(|(r, _)| *r == inj.resolution)
                    .map(|(_, p)| p)
                    .ok_or_else(|| Error::Config(format!("no token projection for resolution {}", inj.resolution)))?;
                let t = proj.forward(g, ctx.bundle_tokens)?;
                ctx.tokens.push((inj.resolution, t));
                t
            }
        };
        let flat = g.reshape(f, &[c, hw])?;
        let flat = g.transpose(flat)?;
        let q = inj.q.forward(g, flat)?;
        let k = inj.k.forward(g, tokens)?;
        let v = inj.v.forward(g, tokens)?;
        let masks: Result<Vec<Tensor>> = (0..ctx.pyramid.n_scales()).map(|k| ctx.pyramid.matrix(k, s[1])).collect();
        let att = masked_cross_attention(g, q, k, v, &masks?, ctx.alphas, self.cfg.mask_mode)?;
        ctx.attention.push(SiteAttention { resolution: inj.resolution, weights: att.weights });
        let o = inj.o.forward(g, att.out)?;
        let o = g.transpose(o)?;
        let o = g.reshape(o, &s)?;
        Ok(g.add(f, o)?)
    }

    /// ε prediction for a C×S×S image at timestep `t`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, t: usize, bundle: &ConditionBundle) -> Result<UNetOutput> {
        let pyramid = self.pyramid(bundle)?;
        self.forward_with_pyramid(g, x, t, bundle, &pyramid)
    }

    pub fn forward_with_pyramid(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        t: usize,
        bundle: &ConditionBundle,
        pyramid: &MaskPyramid,
    ) -> Result<UNetOutput> {
        let cfg = &self.cfg;
        let sx = g.shape(x).to_vec();
        if sx != [cfg.in_channels, cfg.image_size, cfg.image_size] {
            return Err(Error::Config(format!(
                "expected a {}×{}×{} input, got {sx:?}",
                cfg.in_channels, cfg.image_size, cfg.image_size
            )));
        }
        if pyramid.n_entities != bundle.n_entities() {
            return Err(Error::Config(format!(
                "mask pyramid has {} entity columns for {} entity tokens",
                pyramid.n_entities,
                bundle.n_entities()
            )));
        }
        let temb = g.constant(Tensor::new(vec![1, cfg.time_dim], timestep_embedding(t, cfg.time_dim))?);
        let temb = self.time_in.forward(g, temb)?;
        let temb = g.silu(temb)?;
        let temb = self.time_out.forward(g, temb)?;
        let temb = g.silu(temb)?;
        let bundle_tokens = bundle.tokens(g)?;
        let alphas = self.scale_weights.alphas(g)?;
        let mut ctx = InjectCtx { bundle_tokens, pyramid, alphas, tokens: Vec::new(), attention: Vec::new() };

        let mut h = self.stem.forward(g, x)?;
        let mut skips = vec![h];
        for b in &self.down {
            h = self.run_block(g, b, h, temb, &mut ctx)?;
            skips.push(h);
        }
        skips.pop();
        h = self.run_block(g, &self.mid, h, temb, &mut ctx)?;
        for b in &self.up {
            let skip = skips.pop().expect("one skip per up block");
            let u = g.upsample2x(h)?;
            let cat = g.concat(&[u, skip], 0)?;
            h = self.run_block(g, b, cat, temb, &mut ctx)?;
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h)?;
        let eps = self.head.forward(g, h)?;
        let means = g.avg_pool(x)?;
        let means = g.reshape(means, &[1, cfg.in_channels])?;
        let scale = self.global.0.forward(g, temb)?;
        let shift = self.global.1.forward(g, temb)?;
        let scaled = g.mul(scale, means)?;
        let bias = g.add(scaled, shift)?;
        let bias = g.reshape(bias, &[cfg.in_channels, 1, 1])?;
        let eps = g.add(eps, bias)?;
        Ok(UNetOutput { eps, attention: ctx.attention })
    }
}

struct InjectCtx<'a> {
    bundle_tokens: Var,
    pyramid: &'a MaskPyramid,
    alphas: Var,
    tokens: Vec<(usize, Var)>,
    attention: Vec<SiteAttention>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{EncoderConfig, LayoutEncoder};
    use crate::layout::{CategoryId, Layout, LayoutEntity, TaskId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(size: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Mask {
        let mut m = Mask::new(size, size).unwrap();
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, true);
            }
        }
        m
    }

    fn entity(m: Mask) -> UnifiedEntity {
        UnifiedEntity { category: CategoryId::BUILDING, bbox: m.tight_box().unwrap(), mask: m }
    }

    #[test]
    fn pyramid_columns() {
        let full = entity(Mask::full(32, 32).unwrap());
        let p = MaskPyramid::build(&[full], &[16, 8, 4]).unwrap();
        for k in 0..3 {
            let r = p.resolutions[k];
            assert!(p.matrix(k, r).unwrap().data().iter().all(|&v| v == 1.0));
        }
        let dot = entity(block(16, 5, 9, 6, 10));
        let p = MaskPyramid::build(&[dot], &[16]).unwrap();
        assert_eq!(p.masks[0][0].area(), 1);
        let corner = entity(block(16, 0, 0, 2, 2));
        let p = MaskPyramid::build(&[corner], &[8]).unwrap();
        assert_eq!(p.masks[0][0].area(), 1);
        assert!(p.masks[0][0].get(0, 0));
    }

    #[test]
    fn global_columns_are_always_visible() {
        let p = MaskPyramid::build(&[entity(block(32, 0, 0, 4, 4))], &[8]).unwrap();
        let m = p.matrix(0, 8).unwrap();
        for row in 0..64 {
            assert_eq!(&m.row(row)[1..], &[1.0, 1.0]);
        }
        assert_eq!(m.data().iter().step_by(3).filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn initial_scale_weights_are_exact() {
        let mut store = ParamStore::new();
        let sw = ScaleWeights::new(&mut store, "sw", 3).unwrap();
        let mut g = Graph::new(&store);
        let a = sw.alphas(&mut g).unwrap();
        assert_eq!(g.value(a).data(), &[0.1, 0.3, 0.6]);
        assert_eq!(sw.values(&store), vec![0.1, 0.3, 0.6]);
    }

    #[test]
    fn config_checks() {
        assert!(UNetConfig { image_size: 24, ..Default::default() }.check().is_err());
        assert!(UNetConfig { injection_resolutions: vec![12], ..Default::default() }.check().is_err());
        assert!(UNetConfig::default().check().is_ok());
        assert_eq!(UNetConfig::default().active_resolutions(), vec![8, 4]);
        let all = UNetConfig { injection_mode: InjectionMode::AllLevels, ..Default::default() };
        assert_eq!(all.active_resolutions(), vec![16, 8, 4]);
    }

    fn small() -> (ParamStore, LayoutEncoder, UNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = LayoutEncoder::new(EncoderConfig::default(), &mut store, &mut rng).unwrap();
        let cfg = UNetConfig { base_channels: 8, injection_mode: InjectionMode::AllLevels, ..Default::default() };
        let unet = UNet::new(cfg, &mut store, &mut rng).unwrap();
        (store, enc, unet)
    }

    fn layout() -> Layout {
        Layout::new(
            TaskId::SemanticSegmentation,
            vec![
                LayoutEntity::with_mask(CategoryId::BUILDING, block(32, 2, 2, 12, 14)),
                LayoutEntity::with_mask(CategoryId::WATER, block(32, 18, 6, 30, 26)),
            ],
        )
    }

    #[test]
    fn zero_head_predicts_zero_at_init() {
        let (store, enc, unet) = small();
        let mut g = Graph::inference(&store);
        let b = enc.condition(&mut g, &layout(), 32, false, (1.0, 1.0)).unwrap();
        let x = g.constant(Tensor::full(&[3, 32, 32], 0.3));
        let out = unet.forward(&mut g, x, 500, &b).unwrap();
        assert_eq!(g.shape(out.eps), &[3, 32, 32]);
        assert!(g.value(out.eps).data().iter().all(|&v| v == 0.0));
        assert_eq!(out.attention.len(), 6);
    }

    #[test]
    fn zero_output_projection_makes_injection_identity() {
        let (store, enc, unet) = small();
        let inj = unet.down[0].inject.clone().unwrap();
        let mut g = Graph::inference(&store);
        let b = enc.null_bundle(&mut g).unwrap();
        let p = unet.pyramid(&b).unwrap();
        let f = g.constant(Tensor::new(vec![8, 16, 16], (0..2048).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let tokens = b.tokens(&mut g).unwrap();
        let alphas = unet.scale_weights.alphas(&mut g).unwrap();
        let mut ctx = InjectCtx { bundle_tokens: tokens, pyramid: &p, alphas, tokens: Vec::new(), attention: Vec::new() };
        let out = unet.inject(&mut g, &inj, f, &mut ctx).unwrap();
        assert_eq!(g.value(out), g.value(f));
    }

    #[test]
    fn attention_rows_sum_to_one_and_blocked_columns_get_nothing() {
        let (store, enc, unet) = small();
        let mut g = Graph::inference(&store);
        let b = enc.condition(&mut g, &layout(), 32, false, (1.0, 1.0)).unwrap();
        let x = g.constant(Tensor::full(&[3, 32, 32], 0.1));
        let out = unet.forward(&mut g, x, 10, &b).unwrap();
        let p = unet.pyramid(&b).unwrap();
        for site in &out.attention {
            let w = g.value(site.weights);
            let r = site.resolution;
            let masks: Vec<Tensor> = (0..3).map(|k| p.matrix(k, r).unwrap()).collect();
            for row in 0..r * r {
                let s: f64 = w.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for col in 0..2 {
                    if masks.iter().all(|m| m.row(row)[col] == 0.0) {
                        assert!(w.row(row)[col] < 1e-12);
                    }
                }
            }
        }
    }
}
