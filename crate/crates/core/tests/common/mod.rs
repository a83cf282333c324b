#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terragen::conditioning::EncoderConfig;
use terragen::denoiser::{InjectionMode, UNetConfig};
use terragen::diffusion::ModelConfig;
use terragen::layout::{BBox, CategoryId, Layout, LayoutEntity, Mask, TaskId};
use terragen::numerics::{Graph, ParamId, ParamStore, Var};

/// Central finite-difference check of every parameter gradient produced by
/// `build` against the analytic backward pass. Samples `samples` random
/// coordinates across all parameters and returns the worst relative error.
pub fn gradcheck<F>(store: &mut ParamStore, build: F, samples: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let coords = random_coords(store, samples, seed);
    gradcheck_at(store, build, &coords)
}

/// `n` (parameter, flat index) pairs drawn uniformly over all scalars.
pub fn random_coords(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            (ParamId(pi), flat)
        })
        .collect()
}

/// Worst relative error over `coords`, with h = 1e-5 central differences.
///
/// Relative error is |a - n| / max(|a|, |n|, 1e-6) so that coordinates
/// with vanishing gradient do not blow the ratio up.
pub fn gradcheck_at<F>(store: &mut ParamStore, build: F, coords: &[(ParamId, usize)]) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let h = 1e-5;
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        let grads = g.backward(loss).expect("backward");
        store
            .iter()
            .map(|(id, p)| grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for &(id, flat) in coords {
        let orig = store.get(id).value.data()[flat];
        store.get_mut(id).value.data_mut()[flat] = orig + h;
        let up = eval(store);
        store.get_mut(id).value.data_mut()[flat] = orig - h;
        let down = eval(store);
        store.get_mut(id).value.data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[id.0][flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Adds N(0, scale²) noise to every parameter so zero-initialized heads and
/// projections carry gradient.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// 8×8 single-channel model with three levels and three injection scales.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.unet = UNetConfig {
        image_size: 8,
        in_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 1, 1],
        injection_resolutions: vec![4, 2, 1],
        injection_mode: InjectionMode::AllLevels,
        cond_dim: 8,
        time_dim: 8,
        ..UNetConfig::default()
    };
    cfg.encoder = EncoderConfig { dim: 8, fusion_heads: 2, fusion_key_dim: 4, mask_channels: [4, 4, 8, 8], ..EncoderConfig::default() };
    cfg
}

pub fn tiny_layout() -> Layout {
    let mut building = Mask::new(8, 8).unwrap();
    for r in 1..4 {
        for c in 1..5 {
            building.set(r, c, true);
        }
    }
    Layout::new(
        TaskId::SemanticSegmentation,
        vec![
            LayoutEntity::with_mask(CategoryId::BUILDING, building),
            LayoutEntity::with_box(CategoryId::WATER, BBox::new(0.5, 0.5, 1.0, 0.875).unwrap()),
        ],
    )
}

/// 16×16 RGB model, small enough for sampling tests.
pub fn small_rgb_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.unet = UNetConfig {
        image_size: 16,
        base_channels: 8,
        channel_mults: vec![1, 1, 1],
        injection_resolutions: vec![8, 4, 2],
        cond_dim: 16,
        time_dim: 16,
        ..UNetConfig::default()
    };
    cfg.encoder = EncoderConfig { dim: 16, fusion_heads: 2, fusion_key_dim: 4, mask_channels: [4, 8, 8, 16], ..EncoderConfig::default() };
    cfg
}

pub fn rgb_layout() -> Layout {
    Layout::new(
        TaskId::BuildingExtraction,
        vec![
            LayoutEntity::with_box(CategoryId::BUILDING, BBox::new(0.125, 0.125, 0.5, 0.4375).unwrap()),
            LayoutEntity::with_box(CategoryId::BUILDING, BBox::new(0.5625, 0.5, 0.9375, 0.875).unwrap()),
        ],
    )
}
