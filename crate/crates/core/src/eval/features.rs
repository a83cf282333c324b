use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fid::FeatureStats;
use crate::{Error, Result};

/// Side of the pooled grid fed to the built-in extractors.
pub const POOL: usize = 8;
pub const DEFAULT_EXTRACTOR: &str = "proj64";

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &RgbImage) -> Vec<f64>;
}

/// Area-average pool to POOL×POOL, channel-major, scaled to [0, 1].
pub fn pooled(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * POOL * POOL];
    let mut counts = vec![0usize; POOL * POOL];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * POOL / h) * POOL + x * POOL / w;
            counts[cell] += 1;
            for (c, v) in img.get_pixel(x as u32, y as u32).0.iter().enumerate() {
                out[c * POOL * POOL + cell] += *v as f64 / 255.0;
            }
        }
    }
    for c in 0..3 {
        for (i, &k) in counts.iter().enumerate() {
            if k > 0 {
                out[c * POOL * POOL + i] /= k as f64;
            }
        }
    }
    out
}

/// The pooled pixels themselves (192 dims).
pub struct PooledPixels;

impl FeatureExtractor for PooledPixels {
    fn name(&self) -> &str {
        "pooled"
    }
    fn dim(&self) -> usize {
        3 * POOL * POOL
    }
    fn extract(&self, img: &RgbImage) -> Vec<f64> {
        pooled(img)
    }
}

/// Pooled pixels through a fixed Gaussian projection, entries N(0, 1/in).
pub struct RandomProjection {
    name: String,
    weights: Vec<f64>,
    out: usize,
}

impl RandomProjection {
    pub fn new(name: &str, out: usize, seed: u64) -> RandomProjection {
        let input = 3 * POOL * POOL;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input as f64).sqrt();
        let weights = (0..out * input).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        RandomProjection { name: name.to_string(), weights, out }
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.out
    }
    fn extract(&self, img: &RgbImage) -> Vec<f64> {
        let x = pooled(img);
        self.weights.chunks(x.len()).map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum()).collect()
    }
}

/// Seed of the built-in projection; fixed so feature spaces agree across runs.
pub const PROJECTION_SEED: u64 = 0x0f1d;

/// Looks up an extractor by name: "proj64" (default) or "pooled".
pub fn extractor(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "proj64" => Ok(Box::new(RandomProjection::new("proj64", 64, PROJECTION_SEED))),
        "pooled" => Ok(Box::new(PooledPixels)),
        other => Err(Error::Config(format!("unknown feature extractor {other:?} (known: proj64, pooled)"))),
    }
}

pub fn features(images: &[RgbImage], ex: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.is_empty() {
        return Err(Error::Config("no images to featurize".into()));
    }
    let rows: Vec<Vec<f64>> = images.iter().map(|i| ex.extract(i)).collect();
    FeatureStats::from_rows(&rows)
}
