//! Static renderings: score heatmaps, refined points, localizer outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::{BBox, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMap, ImageTensor};
use crate::geometry::Point;
use crate::localizer::ImagePredictions;
use crate::refine::{cprpp_infer_image, feature_labels, CascadeConfig, PointLabel};
use crate::refiner::{sigmoid, CprHead, RefinerModel};

pub const ANNOTATED: Rgb<u8> = Rgb([0, 220, 0]);
pub const REFINED: Rgb<u8> = Rgb([255, 230, 0]);
pub const SEMANTIC: Rgb<u8> = Rgb([230, 20, 20]);
const OUTLINE: Rgb<u8> = Rgb([0, 0, 0]);
const GT_BOX: Rgb<u8> = Rgb([255, 255, 255]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([255, 80, 80]),
    Rgb([80, 160, 255]),
    Rgb([255, 200, 40]),
    Rgb([180, 90, 255]),
    Rgb([40, 220, 200]),
    Rgb([255, 130, 200]),
];

/// Which rendering to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Heatmaps,
    RefinedPoints,
    Predictions,
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heatmaps" => Ok(View::Heatmaps),
            "refined-points" => Ok(View::RefinedPoints),
            "predictions" => Ok(View::Predictions),
            other => Err(Error::Input(format!(
                "unknown view {other:?} (expected heatmaps, refined-points or predictions)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisualizeReport {
    pub written: Vec<PathBuf>,
    /// Requested ids absent from the dataset.
    pub skipped: Vec<u64>,
}

/// Per-cell classification score of one category, row-major.
pub fn score_map(f: &FeatureMap, head: &CprHead, category: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.height * f.width);
    for y in 0..f.height {
        for x in 0..f.width {
            let cell: Vec<f64> = f.cell(x, y).iter().map(|&v| v as f64).collect();
            out.push(sigmoid(head.cls.forward(&cell)[category]));
        }
    }
    out
}

fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Blends `scores` (absolute scale, 0 to 1) over the image.
pub fn overlay_heatmap(img: &RgbImage, scores: &[f64], h: usize, w: usize, stride: u32) -> RgbImage {
    let mut out = img.clone();
    let s = stride as f64;
    for (x, y, px) in out.enumerate_pixels_mut() {
        // Pixel centers sample the map with feature coordinates = px / stride.
        let fx = ((x as f64 + 0.5) / s).clamp(0.0, (w - 1) as f64);
        let fy = ((y as f64 + 0.5) / s).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let v = scores[y0 * w + x0] * (1.0 - ax) * (1.0 - ay)
            + scores[y0 * w + x1] * ax * (1.0 - ay)
            + scores[y1 * w + x0] * (1.0 - ax) * ay
            + scores[y1 * w + x1] * ax * ay;
        let c = colormap(v);
        for k in 0..3 {
            px[k] = (0.45 * px[k] as f64 + 0.55 * 255.0 * c[k]).round() as u8;
        }
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Filled disk with a one-pixel dark ring.
pub fn draw_marker(img: &mut RgbImage, p: Point, radius: f64, color: Rgb<u8>) {
    let r = radius.ceil() as i64 + 1;
    let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx as f64 + 0.5 - p.x.fract()).powi(2) + (dy as f64 + 0.5 - p.y.fract()).powi(2)).sqrt();
            if d <= radius {
                put(img, cx + dx, cy + dy, color);
            } else if d <= radius + 1.0 {
                put(img, cx + dx, cy + dy, OUTLINE);
            }
        }
    }
}

pub fn draw_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let (x0, y0) = (x0.round() as i64, y0.round() as i64);
    let (x1, y1) = (x1.round() as i64, y1.round() as i64);
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    draw_rect(img, b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0, color);
}

fn load_rgb(dir: &Path, record: &ImageRecord) -> Result<RgbImage> {
    let path = dir.join(&record.file_name);
    Ok(image::open(&path)
        .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8())
}

fn save(img: &RgbImage, path: PathBuf, written: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(&path)?;
    written.push(path);
    Ok(())
}

/// Resolves `ids` against the dataset; an empty list selects every image.
fn select<'a>(ds: &'a Dataset, ids: &[u64], report: &mut VisualizeReport) -> Vec<&'a ImageRecord> {
    if ids.is_empty() {
        return ds.images.iter().collect();
    }
    let by_id: HashMap<u64, &ImageRecord> = ds.images.iter().map(|i| (i.image_id, i)).collect();
    let mut out = Vec::new();
    for id in ids {
        match by_id.get(id) {
            Some(r) => out.push(*r),
            None => {
                log::warn!("image id {id} not found, skipping");
                report.skipped.push(*id);
            }
        }
    }
    out
}

/// One file per stage and category: `heatmap_<image>_s<stage>_c<category>.png`.
pub fn render_heatmaps(
    model: &RefinerModel,
    ds: &Dataset,
    image_dir: &Path,
    ids: &[u64],
    out_dir: &Path,
) -> Result<VisualizeReport> {
    let mut report = VisualizeReport::default();
    for record in select(ds, ids, &mut report) {
        let img = load_rgb(image_dir, record)?;
        let f = model.extractor.extract(&ImageTensor::from_rgb(&img))?;
        for (k, head) in model.heads.stages.iter().enumerate() {
            for c in 0..head.num_categories() {
                let scores = score_map(&f, head, c);
                let mut view = overlay_heatmap(&img, &scores, f.height, f.width, f.stride);
                for cp in record.coarse_points.iter().filter(|p| p.category == c) {
                    draw_marker(&mut view, cp.position, 2.0, ANNOTATED);
                }
                let name = format!("heatmap_{}_s{}_c{}.png", record.image_id, k + 1, c);
                save(&view, out_dir.join(name), &mut report.written)?;
            }
        }
    }
    Ok(report)
}

/// Annotated (green) and refined (yellow) points; with a model, also the final
/// stage's semantic points (red) and their bounding box.
///
/// `refined` holds the refined points; the annotated point of each object is
/// its trace source when present, otherwise the matching point of `annotated`.
pub fn render_refined(
    refined: &Dataset,
    annotated: Option<&Dataset>,
    semantic: Option<(&RefinerModel, &CascadeConfig)>,
    image_dir: &Path,
    ids: &[u64],
    out_dir: &Path,
) -> Result<VisualizeReport> {
    let mut report = VisualizeReport::default();
    let originals: HashMap<u64, Point> = annotated
        .into_iter()
        .flat_map(|d| d.images.iter())
        .flat_map(|i| i.coarse_points.iter())
        .map(|p| (p.object_id, p.position))
        .collect();
    for record in select(refined, ids, &mut report) {
        let clean = load_rgb(image_dir, record)?;
        let mut img = clean.clone();
        for obj in &record.objects {
            draw_box(&mut img, &obj.bbox, GT_BOX);
        }
        let sources: Vec<Option<Point>> = record
            .coarse_points
            .iter()
            .map(|p| {
                p.trace
                    .as_ref()
                    .map(|t| Point::new(t.source[0], t.source[1]))
                    .or_else(|| originals.get(&p.object_id).copied())
            })
            .collect();
        if let Some((model, cascade)) = semantic {
            let stride = model.extractor.stride() as f64;
            let labels: Vec<PointLabel> = record
                .coarse_points
                .iter()
                .zip(&sources)
                .map(|(p, s)| PointLabel {
                    object_id: p.object_id,
                    category: p.category,
                    position: s.unwrap_or(p.position),
                })
                .collect();
            let f = model.extractor.extract(&ImageTensor::from_rgb(&clean))?;
            let inf = cprpp_infer_image(&f, &feature_labels(&labels, model.extractor.stride()), &model.heads, cascade)?;
            if let Some(last) = inf.states.last() {
                for set in &last.semantic {
                    let pts: Vec<Point> = set.points.iter().map(|p| p.scale(stride)).collect();
                    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                    for p in &pts {
                        x0 = x0.min(p.x);
                        y0 = y0.min(p.y);
                        x1 = x1.max(p.x);
                        y1 = y1.max(p.y);
                    }
                    if !pts.is_empty() {
                        draw_rect(&mut img, x0, y0, x1, y1, SEMANTIC);
                    }
                    for p in pts {
                        draw_marker(&mut img, p, 1.0, SEMANTIC);
                    }
                }
            }
        }
        for (p, s) in record.coarse_points.iter().zip(&sources) {
            if let Some(s) = s {
                draw_marker(&mut img, *s, 3.0, ANNOTATED);
            }
            draw_marker(&mut img, p.position, 3.0, REFINED);
        }
        let name = format!("refined_{}.png", record.image_id);
        save(&img, out_dir.join(name), &mut report.written)?;
    }
    Ok(report)
}

/// Ground-truth boxes (white) and predicted points colored by category.
pub fn render_predictions(
    ds: &Dataset,
    predictions: &[ImagePredictions],
    min_score: f64,
    image_dir: &Path,
    ids: &[u64],
    out_dir: &Path,
) -> Result<VisualizeReport> {
    let mut report = VisualizeReport::default();
    let by_id: HashMap<u64, &ImagePredictions> = predictions.iter().map(|p| (p.image_id, p)).collect();
    for record in select(ds, ids, &mut report) {
        let mut img = load_rgb(image_dir, record)?;
        for obj in &record.objects {
            draw_box(&mut img, &obj.bbox, GT_BOX);
        }
        if let Some(preds) = by_id.get(&record.image_id) {
            for p in preds.predictions.iter().filter(|p| p.score >= min_score) {
                let color = PALETTE[p.category % PALETTE.len()];
                draw_marker(&mut img, Point::new(p.x, p.y), 2.0 + 2.0 * p.score, color);
            }
        }
        let name = format!("predictions_{}.png", record.image_id);
        save(&img, out_dir.join(name), &mut report.written)?;
    }
    Ok(report)
}
