//! Procedural colour-coded scenes with exact layouts, and their on-disk corpus.

mod dataset;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layout::{CategoryId, Layout, LayoutEntity, Mask, TaskId};
use crate::{Error, Result};

pub use dataset::{
    read_dataset, write_dataset, DatasetConfig, DatasetManifest, DatasetSample, SampleRecord, Split, MANIFEST_FILE,
};

/// RGB colour per category id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Default for Palette {
    fn default() -> Self {
        Palette(vec![
            [220, 40, 40],  // building
            [250, 250, 250], // road
            [30, 60, 220],  // water
            [20, 160, 20],  // vegetation
            [250, 220, 0],  // vehicle
            [230, 0, 230],  // storage tank
            [0, 200, 200],  // flood
        ])
    }
}

/// Smallest allowed L∞ distance between two palette colours.
pub const MIN_PALETTE_SEPARATION: u8 = 64;

impl Palette {
    pub fn color(&self, c: CategoryId) -> Option<[u8; 3]> {
        self.0.get(c.0).copied()
    }

    pub fn min_separation(&self) -> u8 {
        let mut best = u8::MAX;
        for (i, a) in self.0.iter().enumerate() {
            for b in &self.0[i + 1..] {
                let d = a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0);
                best = best.min(d);
            }
        }
        best
    }

    pub fn check(&self) -> Result<()> {
        if self.0.len() != CategoryId::COUNT {
            return Err(Error::Config(format!("palette has {} colours for {} categories", self.0.len(), CategoryId::COUNT)));
        }
        let sep = self.min_separation();
        if sep < MIN_PALETTE_SEPARATION {
            return Err(Error::Config(format!("palette colours only {sep} apart (need {MIN_PALETTE_SEPARATION})")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Stripe,
    Blob,
    SmallSquare,
    Disc,
}

impl ShapeKind {
    pub fn for_category(c: CategoryId) -> ShapeKind {
        match c {
            CategoryId::BUILDING => ShapeKind::Rectangle,
            CategoryId::ROAD => ShapeKind::Stripe,
            CategoryId::VEHICLE => ShapeKind::SmallSquare,
            CategoryId::STORAGE_TANK => ShapeKind::Disc,
            _ => ShapeKind::Blob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub task: TaskId,
    /// Inclusive range of requested entities.
    pub n_entities: (usize, usize),
    pub categories: Vec<CategoryId>,
    pub image_size: usize,
    /// Peak deviation of the background texture from mid-gray, in 8-bit units.
    pub texture_amplitude: f64,
    /// Per-pixel Gaussian noise σ in 8-bit units, truncated at 3σ.
    pub noise_sigma: f64,
    pub palette: Palette,
}

impl SceneSpec {
    /// Default spec for `task` at `image_size`.
    pub fn for_task(task: TaskId, image_size: usize) -> SceneSpec {
        let n_entities = match task {
            TaskId::Detection => (1, 6),
            TaskId::SemanticSegmentation => (1, 5),
            TaskId::BuildingExtraction => (1, 5),
            TaskId::RoadExtraction => (1, 3),
            TaskId::FloodDetection => (1, 3),
        };
        SceneSpec {
            task,
            n_entities,
            categories: task.categories().to_vec(),
            image_size,
            texture_amplitude: 12.0,
            noise_sigma: 3.0,
            palette: Palette::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.palette.check()?;
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.image_size)));
        }
        if self.n_entities.0 > self.n_entities.1 {
            return Err(Error::Config(format!("entity range {:?} is empty", self.n_entities)));
        }
        if self.n_entities.1 > 0 && self.categories.is_empty() {
            return Err(Error::Config("no categories to draw".into()));
        }
        if let Some(c) = self.categories.iter().find(|c| !self.task.allows(**c)) {
            return Err(Error::Config(format!("category {} is not part of task {}", c.name(), self.task)));
        }
        if !(0.0..=8.0).contains(&self.noise_sigma) || !(0.0..=16.0).contains(&self.texture_amplitude) {
            return Err(Error::Config("noise σ must lie in [0, 8] and texture amplitude in [0, 16]".into()));
        }
        Ok(())
    }
}

/// Occupancy grid that keeps shapes from touching (8-neighbourhood).
struct Canvas {
    size: usize,
    taken: Vec<bool>,
}

impl Canvas {
    fn fits(&self, m: &Mask) -> bool {
        let s = self.size as isize;
        for r in 0..self.size {
            for c in 0..self.size {
                if !m.get(r, c) {
                    continue;
                }
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr >= 0 && rr < s && cc >= 0 && cc < s && self.taken[(rr * s + cc) as usize] {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn claim(&mut self, m: &Mask) {
        for (t, &b) in self.taken.iter_mut().zip(m.bits()) {
            *t |= b;
        }
    }
}

fn rect(size: usize, r0: usize, c0: usize, h: usize, w: usize) -> Mask {
    let mut m = Mask::new(size, size).expect("positive size");
    for r in r0..(r0 + h).min(size) {
        for c in c0..(c0 + w).min(size) {
            m.set(r, c, true);
        }
    }
    m
}

fn largest_component(m: Mask) -> Mask {
    m.components().into_iter().max_by_key(|c| c.area()).unwrap_or(m)
}

/// Proposes one shape; `horizontal` fixes the road orientation.
fn propose<R: Rng>(rng: &mut R, kind: ShapeKind, size: usize, horizontal: bool) -> Mask {
    match kind {
        ShapeKind::Rectangle => {
            let (h, w) = (rng.gen_range(3..=(size / 3).min(10)), rng.gen_range(3..=(size / 3).min(10)));
            rect(size, rng.gen_range(0..=size - h), rng.gen_range(0..=size - w), h, w)
        }
        ShapeKind::SmallSquare => {
            let s = rng.gen_range(2..=3);
            rect(size, rng.gen_range(0..=size - s), rng.gen_range(0..=size - s), s, s)
        }
        ShapeKind::Stripe => {
            let width = rng.gen_range(2..=3);
            let at = rng.gen_range(0..=size - width);
            if horizontal {
                rect(size, at, 0, width, size)
            } else {
                rect(size, 0, at, size, width)
            }
        }
        ShapeKind::Disc => {
            let radius = rng.gen_range(2.0..4.0);
            let cy = rng.gen_range(radius..size as f64 - radius);
            let cx = rng.gen_range(radius..size as f64 - radius);
            let mut m = Mask::new(size, size).expect("positive size");
            for r in 0..size {
                for c in 0..size {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        m.set(r, c, true);
                    }
                }
            }
            m
        }
        ShapeKind::Blob => {
            let base = rng.gen_range(3.0..(size as f64 / 4.5).min(7.0));
            let cy = rng.gen_range(0.0..size as f64);
            let cx = rng.gen_range(0.0..size as f64);
            let lobes = rng.gen_range(2..=4) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let wobble = rng.gen_range(0.1..0.35);
            let mut m = Mask::new(size, size).expect("positive size");
            for r in 0..size {
                for c in 0..size {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    let reach = base * (1.0 + wobble * (lobes * dy.atan2(dx) + phase).sin());
                    if dy.hypot(dx) <= reach {
                        m.set(r, c, true);
                    }
                }
            }
            largest_component(m)
        }
    }
}

const PLACEMENT_TRIES: usize = 60;

/// Samples a scene for `spec`: an RGB image and its exact layout.
pub fn gen_scene<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Result<(RgbImage, Layout)> {
    spec.check()?;
    let size = spec.image_size;
    let n = rng.gen_range(spec.n_entities.0..=spec.n_entities.1);
    let mut wanted: Vec<CategoryId> = (0..n).map(|_| *spec.categories.choose(rng).expect("non-empty")).collect();
    // Full-span roads go first so later shapes fit around them.
    wanted.sort_by_key(|&c| c != CategoryId::ROAD);
    let horizontal = rng.gen_bool(0.5);
    let mut canvas = Canvas { size, taken: vec![false; size * size] };
    let mut entities = Vec::with_capacity(n);
    for category in wanted {
        let kind = ShapeKind::for_category(category);
        for _ in 0..PLACEMENT_TRIES {
            let m = propose(rng, kind, size, horizontal);
            if m.area() >= 4 && canvas.fits(&m) {
                canvas.claim(&m);
                entities.push(LayoutEntity::new(category, m.tight_box(), Some(m))?);
                break;
            }
        }
    }
    let layout = Layout::new(spec.task, entities);
    let image = render(rng, spec, &layout)?;
    Ok((image, layout))
}

/// Paints `layout` over a textured gray background.
pub fn render<R: Rng>(rng: &mut R, spec: &SceneSpec, layout: &Layout) -> Result<RgbImage> {
    let size = spec.image_size as u32;
    let fy = rng.gen_range(0.5..2.0) / size as f64;
    let fx = rng.gen_range(0.5..2.0) / size as f64;
    let (py, px) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let clip = 3.0 * spec.noise_sigma;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let tex = 0.5
                * ((std::f64::consts::TAU * (fy * y as f64 + py)).sin() + (std::f64::consts::TAU * (fx * x as f64 + px)).sin());
            let mut base = [128.0 + spec.texture_amplitude * tex; 3];
            for e in &layout.entities {
                if e.mask.as_ref().is_some_and(|m| m.get(y as usize, x as usize)) {
                    let col = spec.palette.color(e.category).ok_or(crate::layout::LayoutError::UnknownCategory(e.category.0.to_string()))?;
                    base = col.map(f64::from);
                }
            }
            let px = base.map(|v| {
                let n: f64 = if spec.noise_sigma > 0.0 { noise.sample(rng).clamp(-clip, clip) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    Ok(img)
}
