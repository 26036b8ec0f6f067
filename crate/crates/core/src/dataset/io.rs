//! COCO-instances and internal JSON reading and writing.
//!
//! The internal schema is COCO instances plus an optional per-annotation
//! `"coarse_point": [x, y]` (image pixels) and `"refinement"` trace, so refined
//! points round-trip through the same files.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    rasterize_polygons, rle_counts_from_string, BBox, Category, CoarsePoint, Dataset, ImageRecord,
    Mask, ObjectAnnotation, RefineTrace,
};
use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Plain COCO instances; any point fields are ignored.
    Coco,
    /// COCO instances with coarse/refined points.
    Internal,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco" | "coco-json" => Ok(DatasetFormat::Coco),
            "internal" | "internal-json" => Ok(DatasetFormat::Internal),
            other => Err(Error::Input(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct RawFile {
    #[serde(default)]
    images: Vec<Value>,
    #[serde(default)]
    annotations: Vec<Value>,
    categories: Option<Vec<Value>>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawCategory {
    id: i64,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: Option<Value>,
    #[serde(default)]
    ignore: Option<Value>,
    #[serde(default)]
    segmentation: Option<Value>,
    #[serde(default)]
    coarse_point: Option<[f64; 2]>,
    #[serde(default)]
    refinement: Option<RefineTrace>,
}

fn truthy(v: &Option<Value>) -> bool {
    match v {
        Some(Value::Bool(b)) => *b,
        Some(Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        _ => false,
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Dataset> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        record: "top level".into(),
        message: e.to_string(),
    })?;
    let raw_categories = raw
        .categories
        .ok_or_else(|| Error::Schema("missing \"categories\" table".into()))?;

    let mut cats = Vec::with_capacity(raw_categories.len());
    for (i, v) in raw_categories.into_iter().enumerate() {
        let c: RawCategory = serde_json::from_value(v).map_err(|e| Error::Parse {
            record: format!("category #{i}"),
            message: e.to_string(),
        })?;
        cats.push(c);
    }
    cats.sort_by_key(|c| c.id);
    if cats.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Schema("duplicate category id".into()));
    }
    let dense: HashMap<i64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let categories: Vec<Category> = cats
        .into_iter()
        .enumerate()
        .map(|(i, c)| Category {
            id: i,
            name: c.name,
            source_id: c.id,
        })
        .collect();

    let mut images = Vec::with_capacity(raw.images.len());
    let mut index: HashMap<u64, usize> = HashMap::new();
    for (i, v) in raw.images.into_iter().enumerate() {
        let im: RawImage = serde_json::from_value(v).map_err(|e| Error::Parse {
            record: format!("image #{i}"),
            message: e.to_string(),
        })?;
        if im.width == 0 || im.height == 0 {
            return Err(Error::Schema(format!("image {} has zero size", im.id)));
        }
        if index.insert(im.id, images.len()).is_some() {
            return Err(Error::Schema(format!("duplicate image id {}", im.id)));
        }
        images.push(ImageRecord {
            image_id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            objects: Vec::new(),
            coarse_points: Vec::new(),
        });
    }

    for (i, v) in raw.annotations.into_iter().enumerate() {
        let ann: RawAnnotation = serde_json::from_value(v).map_err(|e| Error::Parse {
            record: format!("annotation #{i}"),
            message: e.to_string(),
        })?;
        let record = || format!("annotation id={} (#{i})", ann.id);
        let img_idx = *index.get(&ann.image_id).ok_or_else(|| Error::Parse {
            record: record(),
            message: format!("unknown image_id {}", ann.image_id),
        })?;
        let category = *dense.get(&ann.category_id).ok_or_else(|| Error::Parse {
            record: record(),
            message: format!("unknown category_id {}", ann.category_id),
        })?;
        let [x, y, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Schema(format!(
                "{}: box must have positive width and height, got {:?}",
                record(),
                ann.bbox
            )));
        }
        let img = &mut images[img_idx];
        let bbox = BBox::from_xywh(x, y, w, h).clip(img.width, img.height);
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::Schema(format!(
                "{}: box lies outside the {}x{} image",
                record(),
                img.width,
                img.height
            )));
        }
        let window = bbox.pixel_window(img.width, img.height);
        let mask = match &ann.segmentation {
            None | Some(Value::Null) => None,
            Some(seg) => Some(decode_segmentation(seg, img.width, img.height, window).map_err(
                |message| Error::Parse {
                    record: record(),
                    message,
                },
            )?),
        };
        let ignore = truthy(&ann.iscrowd) || truthy(&ann.ignore);
        img.objects.push(ObjectAnnotation {
            object_id: ann.id,
            category,
            bbox,
            mask,
            ignore,
        });
        if format == DatasetFormat::Internal && !ignore {
            if let Some([px, py]) = ann.coarse_point {
                img.coarse_points.push(CoarsePoint {
                    object_id: ann.id,
                    category,
                    position: Point::new(px, py),
                    trace: ann.refinement,
                });
            }
        }
    }

    let dataset = Dataset { images, categories };
    dataset.validate()?;
    Ok(dataset)
}

fn decode_segmentation(
    seg: &Value,
    width: u32,
    height: u32,
    window: (u32, u32, u32, u32),
) -> std::result::Result<Mask, String> {
    let mut mask = match seg {
        Value::Array(polys) => {
            let polys: Vec<Vec<f64>> = polys
                .iter()
                .map(|p| serde_json::from_value(p.clone()).map_err(|e| e.to_string()))
                .collect::<std::result::Result<_, _>>()?;
            if polys.iter().any(|p| p.len() < 6 || p.len() % 2 != 0) {
                return Err("polygon needs at least three (x, y) pairs".into());
            }
            rasterize_polygons(&polys, window)
        }
        Value::Object(obj) => {
            let size: [u32; 2] = obj
                .get("size")
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| e.to_string())?
                .ok_or("RLE without size")?;
            if size != [height, width] {
                return Err(format!(
                    "RLE size {size:?} does not match image {height}x{width}"
                ));
            }
            let counts = match obj.get("counts") {
                Some(Value::String(s)) => rle_counts_from_string(s)?,
                Some(v @ Value::Array(_)) => {
                    serde_json::from_value::<Vec<u64>>(v.clone()).map_err(|e| e.to_string())?
                }
                _ => return Err("RLE without counts".into()),
            };
            Mask::from_rle_counts(&counts, width, height, window)?
        }
        _ => return Err("segmentation must be polygons or RLE".into()),
    };
    let (x0, y0, w, h) = window;
    mask.restrict_to(x0, y0, x0 + w, y0 + h);
    Ok(mask)
}

/// Serializes in the internal schema.
pub fn to_json(dataset: &Dataset) -> Value {
    let images: Vec<Value> = dataset
        .images
        .iter()
        .map(|im| {
            json!({
                "id": im.image_id,
                "file_name": im.file_name,
                "width": im.width,
                "height": im.height,
            })
        })
        .collect();
    let mut annotations = Vec::new();
    for im in &dataset.images {
        let points: HashMap<u64, &CoarsePoint> =
            im.coarse_points.iter().map(|p| (p.object_id, p)).collect();
        for obj in &im.objects {
            let mut ann = json!({
                "id": obj.object_id,
                "image_id": im.image_id,
                "category_id": dataset.categories[obj.category].source_id,
                "bbox": obj.bbox.to_xywh(),
                "area": obj.bbox.area(),
                "iscrowd": 0,
                "ignore": u8::from(obj.ignore),
            });
            if let Some(m) = &obj.mask {
                ann["segmentation"] = json!({
                    "size": [im.height, im.width],
                    "counts": m.to_rle_counts(im.width, im.height),
                });
            }
            if let Some(cp) = points.get(&obj.object_id) {
                ann["coarse_point"] = json!([cp.position.x, cp.position.y]);
                if let Some(trace) = &cp.trace {
                    ann["refinement"] = serde_json::to_value(trace).expect("trace serializes");
                }
            }
            annotations.push(ann);
        }
    }
    let categories: Vec<Value> = dataset
        .categories
        .iter()
        .map(|c| json!({ "id": c.source_id, "name": c.name }))
        .collect();
    json!({ "images": images, "annotations": annotations, "categories": categories })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&to_json(dataset))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
