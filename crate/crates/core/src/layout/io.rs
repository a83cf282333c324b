use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, Caption, CategoryId, Layout, LayoutEntity, LayoutError, Mask, Result, TaskId};

/// On-disk layout document. Masks live in sibling 8-bit PNG files (0/255).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub task: TaskId,
    pub entities: Vec<EntityRecord>,
    pub caption: Caption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub category: CategoryId,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

fn file_err(path: &Path, msg: impl ToString) -> LayoutError {
    LayoutError::File { path: path.display().to_string(), msg: msg.to_string() }
}

pub fn write_mask_png(path: &Path, m: &Mask) -> Result<()> {
    let raw: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(m.width() as u32, m.height() as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| file_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| file_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(file_err(path, format!("expected 8-bit grayscale, got {:?}", other.color()))),
    };
    let mut bits = Vec::with_capacity(img.len());
    for &v in img.as_raw() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => return Err(file_err(path, format!("mask value {other} is neither 0 nor 255"))),
        }
    }
    Mask::from_bits(img.height() as usize, img.width() as usize, bits).map_err(|e| file_err(path, e))
}

/// Writes `layout` as JSON at `path`; masks go next to it as `<stem>_m<i>.png`.
pub fn write_layout(path: &Path, layout: &Layout) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("layout");
    let mut entities = Vec::with_capacity(layout.entities.len());
    for (i, e) in layout.entities.iter().enumerate() {
        let mask_file = match &e.mask {
            Some(m) => {
                let name = format!("{stem}_m{i}.png");
                write_mask_png(&dir.join(&name), m)?;
                Some(name)
            }
            None => None,
        };
        entities.push(EntityRecord { category: e.category, bbox: e.bbox, mask_file });
    }
    let doc = LayoutFile { task: layout.task, entities, caption: layout.caption.clone() };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| file_err(path, e))?;
    std::fs::write(path, json).map_err(|e| file_err(path, e))
}

pub fn read_layout(path: &Path) -> Result<Layout> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let doc: LayoutFile = serde_json::from_str(&text).map_err(|e| file_err(path, e))?;
    let mut entities = Vec::with_capacity(doc.entities.len());
    for rec in doc.entities {
        let mask = match &rec.mask_file {
            Some(f) => Some(read_mask_png(&dir.join(f))?),
            None => None,
        };
        entities.push(LayoutEntity::new(rec.category, rec.bbox, mask).map_err(|e| file_err(path, e))?);
    }
    Ok(Layout { task: doc.task, entities, caption: doc.caption })
}
