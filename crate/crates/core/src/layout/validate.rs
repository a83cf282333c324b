use serde::{Deserialize, Serialize};

use super::{BBox, CategoryId, Layout, Mask, TaskId};

/// Grid used to rasterize box-only roads when counting road components.
const ROAD_GRID: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Same-category box pairs above this IoU are flagged.
    pub overlap_iou: f64,
    /// Road-extraction layouts may have at most this many 4-connected road pieces.
    pub max_road_components: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { overlap_iou: 0.9, max_road_components: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Issue {
    OverlappingBoxes { first: usize, second: usize, category: CategoryId, iou: f64 },
    BrokenRoad { components: usize, max: usize },
    SemanticConflict { entity: usize, category: CategoryId, task: TaskId },
}

impl Issue {
    pub fn kind(&self) -> &'static str {
        match self {
            Issue::OverlappingBoxes { .. } => "OverlappingBoxes",
            Issue::BrokenRoad { .. } => "BrokenRoad",
            Issue::SemanticConflict { .. } => "SemanticConflict",
        }
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn validate(layout: &Layout) -> Vec<Issue> {
    validate_with(layout, &ValidationConfig::default())
}

pub fn validate_with(layout: &Layout, cfg: &ValidationConfig) -> Vec<Issue> {
    let mut issues = Vec::new();
    let boxes: Vec<Option<BBox>> = layout
        .entities
        .iter()
        .map(|e| e.bbox.or_else(|| e.mask.as_ref().and_then(Mask::tight_box)))
        .collect();
    for i in 0..layout.entities.len() {
        for j in i + 1..layout.entities.len() {
            let category = layout.entities[i].category;
            if category != layout.entities[j].category {
                continue;
            }
            if let (Some(a), Some(b)) = (&boxes[i], &boxes[j]) {
                let v = iou(a, b);
                if v > cfg.overlap_iou {
                    issues.push(Issue::OverlappingBoxes { first: i, second: j, category, iou: v });
                }
            }
        }
    }
    if layout.task == TaskId::RoadExtraction {
        let components = road_components(layout);
        if components > cfg.max_road_components {
            issues.push(Issue::BrokenRoad { components, max: cfg.max_road_components });
        }
    }
    for (i, e) in layout.entities.iter().enumerate() {
        if !layout.task.allows(e.category) {
            issues.push(Issue::SemanticConflict { entity: i, category: e.category, task: layout.task });
        }
    }
    issues
}

fn road_components(layout: &Layout) -> usize {
    let roads: Vec<_> = layout.entities.iter().filter(|e| e.category == CategoryId::ROAD).collect();
    let (h, w) = roads
        .iter()
        .find_map(|e| e.mask.as_ref().map(|m| (m.height(), m.width())))
        .unwrap_or((ROAD_GRID, ROAD_GRID));
    let mut union = Mask::new(h, w).expect("grid is positive");
    for e in roads {
        let m = match (&e.mask, &e.bbox) {
            (Some(m), _) => m.resize_nearest(h, w).expect("grid is positive"),
            (None, Some(b)) => Mask::rasterize_box(b, h, w).expect("grid is positive"),
            (None, None) => continue,
        };
        union = union.union(&m).expect("same grid");
    }
    union.components().len()
}
