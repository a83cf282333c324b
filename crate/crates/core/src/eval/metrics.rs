use serde::{Deserialize, Serialize};

use crate::layout::{iou, BBox, CategoryId, Mask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub miou: f64,
    pub acc: f64,
}

/// Running per-class intersections and unions plus pixel agreement.
///
/// A pixel's label is the first class whose mask covers it, or background.
/// Classes whose union stays empty are left out of the mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
    correct: u64,
    total: u64,
}

fn labels(masks: &[Mask], n: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; n];
    for (k, m) in masks.iter().enumerate() {
        for (l, &b) in out.iter_mut().zip(m.bits()) {
            if b && l.is_none() {
                *l = Some(k);
            }
        }
    }
    out
}

impl SegAccumulator {
    pub fn add(&mut self, pred: &[Mask], gt: &[Mask]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Config(format!("{} predicted classes vs {} ground-truth classes", pred.len(), gt.len())));
        }
        let Some(first) = gt.first() else { return Ok(()) };
        let (h, w) = (first.height(), first.width());
        if pred.iter().chain(gt).any(|m| m.height() != h || m.width() != w) {
            return Err(Error::Config("segmentation masks must share one grid".into()));
        }
        if self.inter.len() < gt.len() {
            self.inter.resize(gt.len(), 0);
            self.union.resize(gt.len(), 0);
        }
        for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
            let i = p.intersection_count(g) as u64;
            self.inter[k] += i;
            self.union[k] += (p.area() + g.area()) as u64 - i;
        }
        let (lp, lg) = (labels(pred, h * w), labels(gt, h * w));
        self.correct += lp.iter().zip(&lg).filter(|(a, b)| a == b).count() as u64;
        self.total += (h * w) as u64;
        Ok(())
    }

    pub fn finish(&self) -> SegScore {
        let ious: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        let miou = if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
        let acc = if self.total == 0 { 1.0 } else { self.correct as f64 / self.total as f64 };
        SegScore { miou, acc }
    }
}

/// mIoU and pixel accuracy of per-class predicted masks against ground truth.
/// With no class present anywhere both scores are 1.
pub fn seg_metrics(pred: &[Mask], gt: &[Mask]) -> Result<SegScore> {
    let mut acc = SegAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub category: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image: usize,
    pub category: CategoryId,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetScore {
    pub ap50: f64,
    pub map: f64,
    /// Categories with at least one ground-truth box; the means run over these.
    pub categories: usize,
}

/// 0.50, 0.55, …, 0.95.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// All-points AP for one category. Predictions are visited by descending
/// score (stable on ties); each takes the unmatched same-image ground truth
/// with the highest IoU, if that IoU reaches `thr`.
pub fn average_precision(preds: &[(usize, BBox, f64)], gts: &[(usize, BBox)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].2.total_cmp(&preds[a].2));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(preds.len());
    for (rank, &pi) in order.iter().enumerate() {
        let (img, pb, _) = preds[pi];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, (gimg, _))| !used[*gi] && *gimg == img)
            .map(|(gi, (_, gb))| (gi, iou(&pb, gb)))
            .filter(|(_, v)| *v >= thr)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope, then integrate over recall steps.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// AP50 and 10-threshold mAP, each averaged over categories that have ground truth.
pub fn det_metrics(preds: &[ScoredBox], gts: &[GtBox]) -> DetScore {
    let mut cats: Vec<CategoryId> = gts.iter().map(|g| g.category).collect();
    cats.sort();
    cats.dedup();
    if cats.is_empty() {
        return DetScore { ap50: 0.0, map: 0.0, categories: 0 };
    }
    let (mut ap50, mut map) = (0.0, 0.0);
    for &c in &cats {
        let p: Vec<(usize, BBox, f64)> = preds.iter().filter(|b| b.category == c).map(|b| (b.image, b.bbox, b.score)).collect();
        let g: Vec<(usize, BBox)> = gts.iter().filter(|b| b.category == c).map(|b| (b.image, b.bbox)).collect();
        ap50 += average_precision(&p, &g, 0.5);
        map += map_thresholds().iter().map(|&t| average_precision(&p, &g, t)).sum::<f64>() / 10.0;
    }
    let n = cats.len() as f64;
    DetScore { ap50: ap50 / n, map: map / n, categories: cats.len() }
}
