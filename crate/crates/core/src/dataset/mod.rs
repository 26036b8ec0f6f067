//! Ground-truth annotations, coarse point supervision and dataset bookkeeping.

mod coarse;
mod io;
mod mask;

pub use coarse::{
    generate_coarse_point, generate_coarse_points, object_seed, CoarsePointOutcome,
    DEFAULT_RG_SIGMA, MAX_REJECTIONS,
};
pub use io::{load_dataset, parse_dataset, save_dataset, to_json, DatasetFormat};
pub use mask::{point_in_polygon, rasterize_polygons, rle_counts_from_string, Mask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Axis-aligned box in center format, image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From COCO's `[x_min, y_min, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0(), self.y0(), self.w, self.h]
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0() && p.x <= self.x1() && p.y >= self.y0() && p.y <= self.y1()
    }

    /// Intersection with the image rectangle `[0, width] × [0, height]`.
    pub fn clip(&self, width: u32, height: u32) -> BBox {
        let x0 = self.x0().clamp(0.0, width as f64);
        let y0 = self.y0().clamp(0.0, height as f64);
        let x1 = self.x1().clamp(0.0, width as f64);
        let y1 = self.y1().clamp(0.0, height as f64);
        BBox::from_xywh(x0, y0, x1 - x0, y1 - y0)
    }

    /// Pixel window `(x0, y0, width, height)` of every pixel the box touches.
    pub fn pixel_window(&self, image_width: u32, image_height: u32) -> (u32, u32, u32, u32) {
        let x0 = self.x0().floor().clamp(0.0, image_width as f64) as u32;
        let y0 = self.y0().floor().clamp(0.0, image_height as f64) as u32;
        let x1 = self.x1().ceil().clamp(0.0, image_width as f64) as u32;
        let y1 = self.y1().ceil().clamp(0.0, image_height as f64) as u32;
        (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: u64,
    pub category: usize,
    pub bbox: BBox,
    pub mask: Option<Mask>,
    pub ignore: bool,
}

impl ObjectAnnotation {
    /// Whether `p` falls on the object: its mask if present, otherwise its box.
    pub fn covers(&self, p: Point) -> bool {
        match &self.mask {
            Some(m) => m.contains(p) && self.bbox.contains(p),
            None => self.bbox.contains(p),
        }
    }
}

/// Trace left by a refinement run on one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub stages: usize,
    /// Sampling radius of every stage, feature cells.
    pub radii: Vec<u32>,
    /// Point the refinement started from, image pixels.
    pub source: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsePoint {
    pub object_id: u64,
    pub category: usize,
    pub position: Point,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<RefineTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
    pub coarse_points: Vec<CoarsePoint>,
}

impl ImageRecord {
    pub fn object(&self, object_id: u64) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn labeled_objects(&self) -> impl Iterator<Item = &ObjectAnnotation> {
        self.objects.iter().filter(|o| !o.ignore)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Dense index `0..K`.
    pub id: usize,
    pub name: String,
    /// Identifier used by the source file.
    pub source_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Checks the dataset invariants: dense category ids, positive box
    /// extents, and coarse points that refer to labeled objects.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::Schema(format!(
                    "category table is not dense: entry {i} has id {}",
                    c.id
                )));
            }
        }
        let k = self.categories.len();
        for img in &self.images {
            for obj in &img.objects {
                if !(obj.bbox.w > 0.0 && obj.bbox.h > 0.0) {
                    return Err(Error::Schema(format!(
                        "annotation {} in image {} has degenerate box {:?}",
                        obj.object_id, img.image_id, obj.bbox
                    )));
                }
                if obj.category >= k {
                    return Err(Error::Schema(format!(
                        "annotation {} refers to category {} outside table of size {k}",
                        obj.object_id, obj.category
                    )));
                }
            }
            for cp in &img.coarse_points {
                if img.object(cp.object_id).is_none() {
                    return Err(Error::Schema(format!(
                        "point for unknown object {} in image {}",
                        cp.object_id, img.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBin {
    Small,
    Medium,
    Large,
}

impl ScaleBin {
    pub const ALL: [ScaleBin; 3] = [ScaleBin::Small, ScaleBin::Medium, ScaleBin::Large];

    pub fn name(&self) -> &'static str {
        match self {
            ScaleBin::Small => "small",
            ScaleBin::Medium => "medium",
            ScaleBin::Large => "large",
        }
    }
}

pub const SMALL_AREA_LIMIT: f64 = 32.0 * 32.0;
pub const LARGE_AREA_LIMIT: f64 = 96.0 * 96.0;

/// Area bin of a box; an area exactly on a threshold belongs to the upper bin.
pub fn scale_bin(bbox: &BBox) -> ScaleBin {
    let area = bbox.area();
    if area < SMALL_AREA_LIMIT {
        ScaleBin::Small
    } else if area < LARGE_AREA_LIMIT {
        ScaleBin::Medium
    } else {
        ScaleBin::Large
    }
}
