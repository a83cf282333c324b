use super::{BBox, CategoryId, Layout, LayoutEntity, Mask};

/// Entity carrying both a box and a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedEntity {
    pub category: CategoryId,
    pub bbox: BBox,
    pub mask: Mask,
}

impl From<UnifiedEntity> for LayoutEntity {
    fn from(u: UnifiedEntity) -> Self {
        LayoutEntity { category: u.category, bbox: Some(u.bbox), mask: Some(u.mask) }
    }
}

/// Completes every entity to box + mask: boxes are rasterized onto the
/// `grid_h`×`grid_w` grid, masks get their tight box. Entities whose mask
/// ends up empty are dropped.
pub fn unify(layout: &Layout, grid_h: usize, grid_w: usize) -> Vec<UnifiedEntity> {
    unify_entities(&layout.entities, grid_h, grid_w)
}

pub fn unify_entities(entities: &[LayoutEntity], grid_h: usize, grid_w: usize) -> Vec<UnifiedEntity> {
    entities
        .iter()
        .filter_map(|e| {
            let (bbox, mask) = match (&e.bbox, &e.mask) {
                (Some(b), Some(m)) => (*b, m.clone()),
                (Some(b), None) => (*b, Mask::rasterize_box(b, grid_h, grid_w).ok()?),
                (None, Some(m)) => (m.tight_box()?, m.clone()),
                (None, None) => return None,
            };
            if mask.is_empty() {
                return None;
            }
            Some(UnifiedEntity { category: e.category, bbox, mask })
        })
        .collect()
}
