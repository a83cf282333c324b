//! Tasks, categories, boxes and masks; the unifying box/mask transform;
//! geometric augmentation; annotation consistency checks; layout files.

mod io;
mod mask;
mod transform;
mod unify;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_layout, write_layout, LayoutFile};
pub use mask::Mask;
pub use transform::{transform_layout, GeoTransform};
pub use unify::{unify, unify_entities, UnifiedEntity};
pub use validate::{iou, validate, validate_with, Issue, ValidationConfig};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")]
    InvalidBox(f64, f64, f64, f64),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("entity has neither a box nor a mask")]
    EmptyEntity,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, LayoutError>;

/// The five generation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "T0")]
    Detection,
    #[serde(rename = "T1")]
    SemanticSegmentation,
    #[serde(rename = "T2")]
    BuildingExtraction,
    #[serde(rename = "T3")]
    RoadExtraction,
    #[serde(rename = "T4")]
    FloodDetection,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Detection,
        TaskId::SemanticSegmentation,
        TaskId::BuildingExtraction,
        TaskId::RoadExtraction,
        TaskId::FloodDetection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TaskId> {
        Self::ALL.get(i).copied()
    }

    /// Categories that may legally appear in a layout for this task.
    pub fn categories(self) -> &'static [CategoryId] {
        use CategoryId as C;
        match self {
            TaskId::Detection => &[C::VEHICLE, C::STORAGE_TANK],
            TaskId::SemanticSegmentation => &[C::BUILDING, C::ROAD, C::WATER, C::VEGETATION],
            TaskId::BuildingExtraction => &[C::BUILDING],
            TaskId::RoadExtraction => &[C::ROAD],
            TaskId::FloodDetection => &[C::FLOOD],
        }
    }

    pub fn allows(self, c: CategoryId) -> bool {
        self.categories().contains(&c)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskId::Detection => "T0 detection",
            TaskId::SemanticSegmentation => "T1 semantic-segmentation",
            TaskId::BuildingExtraction => "T2 building-extraction",
            TaskId::RoadExtraction => "T3 road-extraction",
            TaskId::FloodDetection => "T4 flood-detection",
        };
        f.write_str(s)
    }
}

/// Index into the global category table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategoryId(pub usize);

const CATEGORY_NAMES: [&str; 7] = ["building", "road", "water", "vegetation", "vehicle", "storage_tank", "flood"];

impl CategoryId {
    pub const BUILDING: CategoryId = CategoryId(0);
    pub const ROAD: CategoryId = CategoryId(1);
    pub const WATER: CategoryId = CategoryId(2);
    pub const VEGETATION: CategoryId = CategoryId(3);
    pub const VEHICLE: CategoryId = CategoryId(4);
    pub const STORAGE_TANK: CategoryId = CategoryId(5);
    pub const FLOOD: CategoryId = CategoryId(6);

    pub const COUNT: usize = CATEGORY_NAMES.len();

    pub fn all() -> impl Iterator<Item = CategoryId> {
        (0..Self::COUNT).map(CategoryId)
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES.get(self.0).copied().unwrap_or("unknown")
    }

    pub fn from_name(name: &str) -> Result<CategoryId> {
        CATEGORY_NAMES
            .iter()
            .position(|n| *n == name)
            .map(CategoryId)
            .ok_or_else(|| LayoutError::UnknownCategory(name.to_string()))
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for CategoryId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CategoryId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CategoryId::from_name(&s).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if ok(x1, x2) && ok(y1, y2) {
            Ok(BBox { x1, y1, x2, y2 })
        } else {
            Err(LayoutError::InvalidBox(x1, y1, x2, y2))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntity {
    pub category: CategoryId,
    pub bbox: Option<BBox>,
    pub mask: Option<Mask>,
}

impl LayoutEntity {
    pub fn new(category: CategoryId, bbox: Option<BBox>, mask: Option<Mask>) -> Result<Self> {
        if bbox.is_none() && mask.is_none() {
            return Err(LayoutError::EmptyEntity);
        }
        Ok(Self { category, bbox, mask })
    }

    pub fn with_box(category: CategoryId, bbox: BBox) -> Self {
        Self { category, bbox: Some(bbox), mask: None }
    }

    pub fn with_mask(category: CategoryId, mask: Mask) -> Self {
        Self { category, bbox: None, mask: Some(mask) }
    }
}

/// Per-category entity counts; the textual description of a scene.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(pub BTreeMap<usize, u32>);

impl Caption {
    pub fn from_entities(entities: &[LayoutEntity]) -> Caption {
        let mut m = BTreeMap::new();
        for e in entities {
            *m.entry(e.category.0).or_insert(0) += 1;
        }
        Caption(m)
    }

    /// Count vector over the full category table.
    pub fn counts(&self) -> Vec<f64> {
        let mut v = vec![0.0; CategoryId::COUNT];
        for (&c, &n) in &self.0 {
            if c < v.len() {
                v[c] = n as f64;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub task: TaskId,
    pub entities: Vec<LayoutEntity>,
    pub caption: Caption,
}

impl Layout {
    /// Builds a layout whose caption counts its own entities.
    pub fn new(task: TaskId, entities: Vec<LayoutEntity>) -> Layout {
        let caption = Caption::from_entities(&entities);
        Layout { task, entities, caption }
    }

    pub fn empty(task: TaskId) -> Layout {
        Layout::new(task, Vec::new())
    }
}
