use crate::denoiser::SiteAttention;
use crate::layout::Mask;
use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Per-pixel loss weights W with floor ≤ W ≤ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveWeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl AdaptiveWeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, weights: vec![1.0; height * width] }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.weights.clone()).expect("dimensions match")
    }
}

/// W = β·M_layout + (1−β)·Norm(Σ_i A_i), then W ← floor + (1−floor)·W.
///
/// `masks` are the entity masks at image resolution, `attention` the
/// matching per-entity attention maps (H×W each). Norm is a min-max rescale
/// to [0, 1] with a constant map sent to zero. With no entities W ≡ 1.
pub fn adaptive_weight(
    height: usize,
    width: usize,
    masks: &[Mask],
    attention: &[Tensor],
    beta: f64,
    floor: f64,
) -> Result<AdaptiveWeightMap> {
    if !(0.0..=1.0).contains(&beta) || !(0.0..=1.0).contains(&floor) {
        return Err(Error::Config(format!("beta {beta} and floor {floor} must lie in [0, 1]")));
    }
    if masks.len() != attention.len() {
        return Err(Error::Config(format!("{} masks but {} attention maps", masks.len(), attention.len())));
    }
    if masks.is_empty() {
        return Ok(AdaptiveWeightMap::ones(height, width));
    }
    let (h, w) = (height, width);
    let mut union = vec![0.0; h * w];
    let mut summed = vec![0.0; h * w];
    for (m, a) in masks.iter().zip(attention) {
        if m.height() != h || m.width() != w || a.shape() != [h, w] {
            return Err(Error::Config(format!(
                "entity mask {}×{} / attention {:?} do not match the {h}×{w} image",
                m.height(),
                m.width(),
                a.shape()
            )));
        }
        for (u, &b) in union.iter_mut().zip(m.bits()) {
            if b {
                *u = 1.0;
            }
        }
        for (s, v) in summed.iter_mut().zip(a.data()) {
            *s += v;
        }
    }
    let lo = summed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = summed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let weights = union
        .iter()
        .zip(&summed)
        .map(|(&m, &s)| {
            let raw = beta * m + (1.0 - beta) * norm(s);
            (floor + (1.0 - floor) * raw).clamp(floor, 1.0)
        })
        .collect();
    Ok(AdaptiveWeightMap { height: h, width: w, weights })
}

/// Per-entity attention maps at image resolution: each site's column is
/// upsampled (nearest) and the sites are averaged. The values are read from
/// the graph, so nothing downstream can send gradient back into attention.
pub fn entity_attention_maps(
    g: &Graph<'_>,
    sites: &[SiteAttention],
    n_entities: usize,
    image_size: usize,
) -> Result<Vec<Tensor>> {
    let weights: Vec<(usize, &Tensor)> = sites.iter().map(|s| (s.resolution, g.value(s.weights))).collect();
    entity_attention_from_values(&weights, n_entities, image_size)
}

pub(crate) fn entity_attention_from_values(
    sites: &[(usize, &Tensor)],
    n_entities: usize,
    image_size: usize,
) -> Result<Vec<Tensor>> {
    let mut maps = vec![vec![0.0; image_size * image_size]; n_entities];
    if sites.is_empty() {
        return Ok(maps.into_iter().map(|m| Tensor::new(vec![image_size, image_size], m).expect("square")).collect());
    }
    for &(r, w) in sites {
        let cols = n_entities + 2;
        if w.shape() != [r * r, cols] || !image_size.is_multiple_of(r) {
            return Err(Error::Config(format!("attention {:?} at resolution {r} for {n_entities} entities", w.shape())));
        }
        let f = image_size / r;
        for (i, map) in maps.iter_mut().enumerate() {
            for y in 0..image_size {
                for x in 0..image_size {
                    map[y * image_size + x] += w.data()[((y / f) * r + x / f) * cols + i];
                }
            }
        }
    }
    let k = sites.len() as f64;
    Ok(maps
        .into_iter()
        .map(|m| Tensor::new(vec![image_size, image_size], m.into_iter().map(|v| v / k).collect()).expect("square"))
        .collect())
}

/// Graph form of the loss weight: attention inputs are detached before use,
/// so the returned constant carries no gradient path into them.
pub fn adaptive_weight_var(
    g: &mut Graph<'_>,
    height: usize,
    width: usize,
    masks: &[Mask],
    attention: &[Var],
    beta: f64,
    floor: f64,
) -> Result<Var> {
    let detached: Vec<Var> = attention.iter().map(|&a| g.detach(a)).collect();
    let values: Vec<Tensor> = detached.iter().map(|&a| g.value(a).clone()).collect();
    let w = adaptive_weight(height, width, masks, &values, beta, floor)?;
    Ok(g.constant(w.to_tensor()))
}
