use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{gen_scene, Palette, SceneSpec};
use crate::layout::{read_layout, write_layout, Layout, TaskId};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Sampling weight per task, indexed like `TaskId::ALL`.
    pub task_mix: [f64; 5],
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub palette: Palette,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            train: 2000,
            val: 200,
            test: 200,
            task_mix: [0.25, 0.30, 0.20, 0.15, 0.10],
            texture_amplitude: 12.0,
            noise_sigma: 3.0,
            palette: Palette::default(),
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Hex SHA-256 of the config's JSON form.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn scene_spec(&self, task: TaskId) -> SceneSpec {
        SceneSpec {
            texture_amplitude: self.texture_amplitude,
            noise_sigma: self.noise_sigma,
            palette: self.palette.clone(),
            ..SceneSpec::for_task(task, self.image_size)
        }
    }

    fn task_picker(&self) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.task_mix).map_err(|e| Error::Config(format!("task mix {:?}: {e}", self.task_mix)))
    }

    /// Generates sample `index` (counted across all splits) in memory.
    pub fn generate(&self, index: usize) -> Result<(TaskId, RgbImage, Layout)> {
        let picker = self.task_picker()?;
        self.generate_with(&picker, index)
    }

    fn generate_with(&self, picker: &WeightedIndex<f64>, index: usize) -> Result<(TaskId, RgbImage, Layout)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let task = TaskId::ALL[picker.sample(&mut rng)];
        let (img, layout) = gen_scene(&mut rng, &self.scene_spec(task))?;
        Ok((task, img, layout))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub image: String,
    pub layout: String,
    pub split: Split,
    pub task: TaskId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec_hash: String,
    pub image_size: usize,
    pub records: Vec<SampleRecord>,
    pub config: DatasetConfig,
    #[serde(skip)]
    pub root: PathBuf,
}

pub struct DatasetSample {
    pub record: SampleRecord,
    pub image: RgbImage,
    pub layout: Layout,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load(&self, record: &SampleRecord) -> Result<DatasetSample> {
        let path = self.root.join(&record.image);
        let image = image::open(&path).map_err(|e| Error::data(&path, e))?.into_rgb8();
        if image.width() as usize != self.image_size || image.height() as usize != self.image_size {
            return Err(Error::data(&path, format!("image is {}×{}, manifest says {}", image.width(), image.height(), self.image_size)));
        }
        let layout = read_layout(&self.root.join(&record.layout))?;
        Ok(DatasetSample { record: record.clone(), image, layout })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<DatasetSample>> {
        self.split(split).map(|r| self.load(r)).collect()
    }
}

/// Writes images, layouts and the manifest under `root`.
pub fn write_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let picker = cfg.task_picker()?;
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("layouts"))?;
    let mut records = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut index = 0;
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            let (task, img, layout) = cfg.generate_with(&picker, index)?;
            index += 1;
            let id = format!("{}_{i:05}", split.name());
            let image = format!("images/{id}.png");
            let layout_path = format!("layouts/{id}.json");
            let p = root.join(&image);
            img.save(&p).map_err(|e| Error::data(&p, e))?;
            write_layout(&root.join(&layout_path), &layout)?;
            records.push(SampleRecord { id, image, layout: layout_path, split, task });
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        spec_hash: cfg.spec_hash(),
        image_size: cfg.image_size,
        records,
        config: cfg.clone(),
        root: root.to_path_buf(),
    };
    std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::data(&path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e))?;
    if manifest.config.spec_hash() != manifest.spec_hash || manifest.config.image_size != manifest.image_size {
        return Err(Error::data(&path, "manifest does not match its stored config"));
    }
    manifest.root = root.to_path_buf();
    Ok(manifest)
}
