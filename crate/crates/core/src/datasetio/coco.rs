//! COCO-style manifest document (`images` / `annotations` / `categories`).
//!
//! Annotation boxes are `[x_min, y_min, width, height]`. Image records carry
//! a few extra fields (`entry_id`, `scene_id`, `splits`) and the top-level
//! `info` block records the format version and size-bin edges.

use serde::{Deserialize, Serialize};

use super::{DatasetEntry, DatasetError, DatasetManifest, LabeledBox, Result};
use crate::geometry::PixelBox;
use crate::scenario::{ModelId, SceneId};

pub const FORMAT_NAME: &str = "uavsim-coco";
pub const FORMAT_VERSION: u32 = 1;
pub const CATEGORY_ID: u64 = 1;
pub const CATEGORY_NAME: &str = "uav";

#[derive(Debug, Serialize, Deserialize)]
struct CocoInfo {
    format: String,
    version: u32,
    bin_edges: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    entry_id: String,
    #[serde(default)]
    label_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_id: Option<SceneId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    splits: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<ModelId>,
    #[serde(default)]
    clamped: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    info: CocoInfo,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

pub fn write_coco_manifest(manifest: &DatasetManifest) -> String {
    let mut images = Vec::with_capacity(manifest.len());
    let mut annotations = Vec::new();
    for (i, e) in manifest.entries().iter().enumerate() {
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: e.image_path.clone().unwrap_or_else(|| e.id.clone()),
            width: e.width,
            height: e.height,
            entry_id: e.id.clone(),
            label_only: e.image_path.is_none(),
            scene_id: e.scene_id,
            splits: e.splits.clone(),
        });
        for b in &e.boxes {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: CATEGORY_ID,
                bbox: [b.bbox.x_min, b.bbox.y_min, b.bbox.width(), b.bbox.height()],
                area: b.bbox.area(),
                iscrowd: 0,
                model_id: b.model_id,
                clamped: b.bbox.clamped,
            });
        }
    }
    let doc = CocoDocument {
        info: CocoInfo { format: FORMAT_NAME.into(), version: FORMAT_VERSION, bin_edges: manifest.bin_edges() },
        images,
        annotations,
        categories: vec![CocoCategory { id: CATEGORY_ID, name: CATEGORY_NAME.into() }],
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn read_coco_manifest(text: &str) -> Result<DatasetManifest> {
    let doc: CocoDocument = serde_json::from_str(text).map_err(|e| DatasetError::Format(e.to_string()))?;
    if doc.info.format != FORMAT_NAME || doc.info.version != FORMAT_VERSION {
        return Err(DatasetError::Format(format!(
            "unsupported manifest format {} v{}",
            doc.info.format, doc.info.version
        )));
    }
    let mut entries: Vec<DatasetEntry> = Vec::with_capacity(doc.images.len());
    let mut index = std::collections::HashMap::new();
    for img in doc.images {
        index.insert(img.id, entries.len());
        entries.push(DatasetEntry {
            image_path: (!img.label_only).then(|| img.file_name.clone()),
            id: img.entry_id,
            width: img.width,
            height: img.height,
            scene_id: img.scene_id,
            boxes: Vec::new(),
            splits: img.splits,
        });
    }
    for a in doc.annotations {
        let &slot = index
            .get(&a.image_id)
            .ok_or_else(|| DatasetError::Format(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let [x, y, w, h] = a.bbox;
        let mut bbox = PixelBox::new(x, y, x + w, y + h).map_err(|e| DatasetError::Format(e.to_string()))?;
        bbox.clamped = a.clamped;
        entries[slot].boxes.push(LabeledBox { bbox, model_id: a.model_id });
    }
    DatasetManifest::new(entries, doc.info.bin_edges)
}
