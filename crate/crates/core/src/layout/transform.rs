use serde::{Deserialize, Serialize};

use super::{BBox, Caption, Layout, LayoutEntity, LayoutError, Mask, Result};

const MIN_MASK_AREA: usize = 4;
const MIN_BOX_AREA: f64 = 1e-4;

/// Geometric augmentation. Rotations are clockwise in image coordinates
/// (y pointing down); scale and shear act about the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GeoTransform {
    FlipHorizontal,
    FlipVertical,
    /// Degrees: 90, 180 or 270.
    Rotate(u32),
    /// Isotropic factor in [0.5, 1.5].
    Scale(f64),
    /// Horizontal shear factor with |k| <= 0.3: x' = x + k (y - 1/2).
    Shear(f64),
}

impl GeoTransform {
    pub fn check(&self) -> Result<()> {
        match *self {
            GeoTransform::Rotate(d) if ![90, 180, 270].contains(&d) => {
                Err(LayoutError::UnsupportedTransform(format!("rotation by {d} degrees")))
            }
            GeoTransform::Scale(s) if !(0.5..=1.5).contains(&s) => {
                Err(LayoutError::UnsupportedTransform(format!("scale factor {s}")))
            }
            GeoTransform::Shear(k) if !(k.abs() <= 0.3) => Err(LayoutError::UnsupportedTransform(format!("shear {k}"))),
            _ => Ok(()),
        }
    }

    fn is_permutation(&self) -> bool {
        matches!(self, GeoTransform::FlipHorizontal | GeoTransform::FlipVertical | GeoTransform::Rotate(_))
    }

    /// Forward map of a normalized point.
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            GeoTransform::FlipHorizontal => (1.0 - x, y),
            GeoTransform::FlipVertical => (x, 1.0 - y),
            GeoTransform::Rotate(90) => (1.0 - y, x),
            GeoTransform::Rotate(180) => (1.0 - x, 1.0 - y),
            GeoTransform::Rotate(_) => (y, 1.0 - x),
            GeoTransform::Scale(s) => (0.5 + s * (x - 0.5), 0.5 + s * (y - 0.5)),
            GeoTransform::Shear(k) => (x + k * (y - 0.5), y),
        }
    }

    /// Inverse map, used for resampling masks.
    fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            GeoTransform::Scale(s) => (0.5 + (x - 0.5) / s, 0.5 + (y - 0.5) / s),
            GeoTransform::Shear(k) => (x - k * (y - 0.5), y),
            GeoTransform::Rotate(90) => (y, 1.0 - x),
            GeoTransform::Rotate(270) => (1.0 - y, x),
            other => other.apply(x, y),
        }
    }

    fn transform_box(&self, b: &BBox) -> Option<BBox> {
        let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| self.apply(x, y));
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let x1 = clamp(corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min));
        let x2 = clamp(corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max));
        let y1 = clamp(corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min));
        let y2 = clamp(corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max));
        BBox::new(x1, y1, x2, y2).ok()
    }

    fn transform_mask(&self, m: &Mask) -> Mask {
        let (h, w) = (m.height(), m.width());
        if self.is_permutation() {
            let swap = matches!(self, GeoTransform::Rotate(90) | GeoTransform::Rotate(270));
            let (oh, ow) = if swap { (w, h) } else { (h, w) };
            let mut out = Mask::new(oh, ow).expect("dimensions are positive");
            for r in 0..h {
                for c in 0..w {
                    if !m.get(r, c) {
                        continue;
                    }
                    let (nr, nc) = match *self {
                        GeoTransform::FlipHorizontal => (r, w - 1 - c),
                        GeoTransform::FlipVertical => (h - 1 - r, c),
                        GeoTransform::Rotate(90) => (c, h - 1 - r),
                        GeoTransform::Rotate(180) => (h - 1 - r, w - 1 - c),
                        _ => (w - 1 - c, r),
                    };
                    out.set(nr, nc, true);
                }
            }
            return out;
        }
        let mut out = Mask::new(h, w).expect("dimensions are positive");
        for r in 0..h {
            for c in 0..w {
                let (sx, sy) = self.invert((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                if !(0.0..1.0).contains(&sx) || !(0.0..1.0).contains(&sy) {
                    continue;
                }
                let (sr, sc) = ((sy * h as f64) as usize, (sx * w as f64) as usize);
                if m.get(sr.min(h - 1), sc.min(w - 1)) {
                    out.set(r, c, true);
                }
            }
        }
        out
    }
}

/// Applies `t` to every entity. Entities that shrink below 4 mask pixels or
/// a box area of 1e-4 are dropped and the caption is recounted.
pub fn transform_layout(layout: &Layout, t: GeoTransform) -> Result<Layout> {
    t.check()?;
    let mut entities = Vec::with_capacity(layout.entities.len());
    for e in &layout.entities {
        let mask = e.mask.as_ref().map(|m| t.transform_mask(m));
        let bbox = match &e.bbox {
            Some(b) => match t.transform_box(b) {
                Some(nb) if nb.area() >= MIN_BOX_AREA => Some(nb),
                _ => continue,
            },
            None => None,
        };
        if let Some(m) = &mask {
            if m.area() < MIN_MASK_AREA {
                continue;
            }
        }
        entities.push(LayoutEntity { category: e.category, bbox, mask });
    }
    let caption = Caption::from_entities(&entities);
    Ok(Layout { task: layout.task, entities, caption })
}
