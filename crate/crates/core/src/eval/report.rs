use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{extractor, features, DEFAULT_EXTRACTOR};
use super::fid::fid;
use super::metrics::{det_metrics, DetScore, GtBox, ScoredBox, SegAccumulator, SegScore};
use super::oracle::{class_masks, oracle_detect, DEFAULT_TOL};
use crate::diffusion::{ddim_sample, initial_noise, to_pixels, Model, NoiseSchedule, SampleConfig, ScheduleConfig};
use crate::layout::{unify, CategoryId, Layout, Mask, TaskId};
use crate::synthdata::{DatasetManifest, Palette, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Oracle colour tolerance in 8-bit units.
    pub tol: u8,
    pub extractor: String,
    pub sample: SampleConfig,
    /// Seed of the shuffled-layout control.
    pub shuffle_seed: u64,
    /// Evaluate only the first n test layouts.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            extractor: DEFAULT_EXTRACTOR.to_string(),
            sample: SampleConfig::default(),
            shuffle_seed: 1,
            limit: None,
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Layout agreement of a set of images, as judged by the colour oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub mask: SegScore,
    pub boxes: DetScore,
    /// Mean cosine between requested and detected category-count vectors.
    pub caption_consistency: f64,
    pub per_task: BTreeMap<TaskId, SegScore>,
    pub n: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => dot / (na * nb),
        _ => 0.0,
    }
}

/// Scores `images[i]` against `layouts[i]`.
pub fn score_images(images: &[RgbImage], layouts: &[&Layout], palette: &Palette, tol: u8) -> Result<Consistency> {
    if images.len() != layouts.len() {
        return Err(Error::Config(format!("{} images for {} layouts", images.len(), layouts.len())));
    }
    let n_cat = CategoryId::COUNT;
    let mut all = SegAccumulator::default();
    let mut per_task: BTreeMap<TaskId, SegAccumulator> = BTreeMap::new();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let mut caption = 0.0;
    for (i, (img, layout)) in images.iter().zip(layouts).enumerate() {
        let (h, w) = (img.height() as usize, img.width() as usize);
        let dets = oracle_detect(img, palette, tol);
        let pred = class_masks(&dets, n_cat, h, w);
        let mut gt = vec![Mask::new(h, w).expect("positive size"); n_cat];
        for u in unify(layout, h, w) {
            let m = u.mask.resize_nearest(h, w).expect("positive size");
            let slot = gt.get_mut(u.category.0).ok_or_else(|| Error::Config(format!("category {} outside the table", u.category.0)))?;
            *slot = slot.union(&m).expect("same grid");
            gts.push(GtBox { image: i, category: u.category, bbox: u.bbox });
        }
        all.add(&pred, &gt)?;
        per_task.entry(layout.task).or_default().add(&pred, &gt)?;
        let mut found = vec![0.0; n_cat];
        for d in &dets {
            found[d.category.0] += 1.0;
            preds.push(ScoredBox { image: i, category: d.category, bbox: d.bbox, score: d.score });
        }
        caption += cosine(&layout.caption.counts(), &found);
    }
    Ok(Consistency {
        mask: all.finish(),
        boxes: det_metrics(&preds, &gts),
        caption_consistency: if images.is_empty() { 0.0 } else { caption / images.len() as f64 },
        per_task: per_task.into_iter().map(|(t, a)| (t, a.finish())).collect(),
        n: images.len(),
    })
}

/// Seeded cyclic permutation (Sattolo), so no index maps to itself when n ≥ 2.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

pub const CAPTION_NOTE: &str = "caption_consistency is a category-count cosine surrogate for a text-image score";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generated vs real test images.
    pub fid: f64,
    /// Pure-noise images vs real test images.
    pub fid_noise: f64,
    /// Generated images against the layouts they were sampled from.
    pub matched: Consistency,
    /// Generated images against a cyclic shuffle of the layouts.
    pub shuffled: Consistency,
    /// Real test images against their own layouts.
    pub real: Consistency,
    pub caption_note: String,
    pub extractor: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl EvalReport {
    pub fn csv_summary(&self) -> String {
        let row = |name: &str, c: &Consistency| {
            format!(
                "{name},{},{},{},{},{},{}\n",
                c.mask.miou, c.mask.acc, c.boxes.ap50, c.boxes.map, c.caption_consistency, c.n
            )
        };
        let mut s = String::from("set,miou,acc,ap50,map,caption_consistency(surrogate),n\n");
        s += &row("matched", &self.matched);
        s += &row("shuffled", &self.shuffled);
        s += &row("real", &self.real);
        s += &format!("fid,{},fid_noise,{}\n", self.fid, self.fid_noise);
        s
    }
}

/// Builds the report from already generated images. `generated[i]` and
/// `real[i]` both correspond to `layouts[i]`.
pub fn report_from_images(
    generated: &[RgbImage],
    real: &[RgbImage],
    layouts: &[&Layout],
    palette: &Palette,
    cfg: &EvalConfig,
    dataset_hash: &str,
) -> Result<EvalReport> {
    if generated.len() < 2 || generated.len() != real.len() {
        return Err(Error::Config(format!("need matching sets of at least 2 images ({} vs {})", generated.len(), real.len())));
    }
    let ex = extractor(&cfg.extractor)?;
    let real_stats = features(real, ex.as_ref())?;
    let gen_stats = features(generated, ex.as_ref())?;
    let size = real[0].width() as usize;
    let noise: Vec<RgbImage> = (0..real.len())
        .map(|i| {
            let t = initial_noise(&[3, size, size], cfg.sample.seed.wrapping_add(i as u64));
            RgbImage::from_raw(size as u32, size as u32, to_pixels(&t)).expect("buffer matches")
        })
        .collect();
    let noise_stats = features(&noise, ex.as_ref())?;
    let perm = derangement(layouts.len(), cfg.shuffle_seed);
    let shuffled: Vec<&Layout> = perm.iter().map(|&j| layouts[j]).collect();
    Ok(EvalReport {
        fid: fid(&real_stats, &gen_stats)?,
        fid_noise: fid(&real_stats, &noise_stats)?,
        matched: score_images(generated, layouts, palette, cfg.tol)?,
        shuffled: score_images(generated, &shuffled, palette, cfg.tol)?,
        real: score_images(real, layouts, palette, cfg.tol)?,
        caption_note: CAPTION_NOTE.to_string(),
        extractor: cfg.extractor.clone(),
        seed: cfg.sample.seed,
        config_hash: cfg.hash(),
        dataset_hash: dataset_hash.to_string(),
    })
}

/// Noise schedule recorded in a training checkpoint's metadata, else the default.
pub fn schedule_from_meta(meta: &serde_json::Value) -> Result<NoiseSchedule> {
    let cfg = match meta.get("train").and_then(|t| t.get("schedule")) {
        Some(v) => serde_json::from_value(v.clone())?,
        None => ScheduleConfig::default(),
    };
    NoiseSchedule::new(&cfg)
}

/// Samples one image per test layout (seed offset by index) and scores it.
pub fn generate_images(model: &Model, schedule: &NoiseSchedule, layouts: &[&Layout], sample: &SampleConfig) -> Result<Vec<RgbImage>> {
    let size = model.image_size() as u32;
    layouts
        .iter()
        .enumerate()
        .map(|(i, layout)| {
            let cfg = SampleConfig { seed: sample.seed.wrapping_add(i as u64), ..sample.clone() };
            let x = ddim_sample(model, schedule, layout, &cfg)?;
            if model.image_shape()[0] != 3 {
                return Err(Error::Config("evaluation needs an RGB model".into()));
            }
            Ok(RgbImage::from_raw(size, size, to_pixels(&x)).expect("buffer matches"))
        })
        .collect()
}

pub fn layout_consistency_report(checkpoint: &Path, manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let (model, _, meta) = Model::load(checkpoint)?;
    if model.image_size() != manifest.image_size {
        return Err(Error::data(checkpoint, format!("model is {}px, dataset is {}px", model.image_size(), manifest.image_size)));
    }
    let schedule = schedule_from_meta(&meta)?;
    let mut samples = manifest.load_split(Split::Test)?;
    if let Some(n) = cfg.limit {
        samples.truncate(n);
    }
    let layouts: Vec<&Layout> = samples.iter().map(|s| &s.layout).collect();
    let real: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
    let generated = generate_images(&model, &schedule, &layouts, &cfg.sample)?;
    report_from_images(&generated, &real, &layouts, &manifest.config.palette, cfg, &manifest.spec_hash)
}
