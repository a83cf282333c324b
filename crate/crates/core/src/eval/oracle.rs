use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::layout::{BBox, CategoryId, Mask};
use crate::synthdata::Palette;

/// Default per-channel tolerance, in 8-bit units.
pub const DEFAULT_TOL: u8 = 32;
/// Components smaller than this are ignored.
pub const MIN_COMPONENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDetection {
    pub category: CategoryId,
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub bbox: BBox,
    pub score: f64,
}

/// Colour-threshold detector: per category, pixels within L∞ `tol` of the
/// palette colour, split into 4-connected components of at least
/// `MIN_COMPONENT` pixels. Score is 1 − mean(L∞ distance)/(tol + 1).
/// Touching same-colour shapes come back as one component.
pub fn oracle_detect(img: &RgbImage, palette: &Palette, tol: u8) -> Vec<OracleDetection> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::new();
    if w == 0 || h == 0 {
        return out;
    }
    for (ci, color) in palette.0.iter().enumerate() {
        let mut dist = vec![0u8; w * h];
        let mut bits = vec![false; w * h];
        for (i, p) in img.pixels().enumerate() {
            let d = p.0.iter().zip(color).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0);
            dist[i] = d;
            bits[i] = d <= tol;
        }
        let m = Mask::from_bits(h, w, bits).expect("dimensions match");
        for comp in m.components() {
            if comp.area() < MIN_COMPONENT {
                continue;
            }
            let total: f64 = comp.bits().iter().zip(&dist).filter(|(b, _)| **b).map(|(_, &d)| d as f64).sum();
            let score = 1.0 - total / comp.area() as f64 / (tol as f64 + 1.0);
            let bbox = comp.tight_box().expect("component is non-empty");
            out.push(OracleDetection { category: CategoryId(ci), mask: Some(comp), bbox, score });
        }
    }
    out
}

/// Per-category union of detected masks, indexed by category id.
pub fn class_masks(dets: &[OracleDetection], n_categories: usize, h: usize, w: usize) -> Vec<Mask> {
    let mut masks = vec![Mask::new(h, w).expect("positive size"); n_categories];
    for d in dets {
        if let (Some(m), Some(slot)) = (&d.mask, masks.get_mut(d.category.0)) {
            *slot = slot.union(m).expect("same grid");
        }
    }
    masks
}
