//! Synthetic shapes: colored geometric objects over textured backgrounds,
//! with exact masks and boxes.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{object_seed, save_dataset, BBox, Category, Dataset, ImageRecord, Mask, ObjectAnnotation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub num_images: usize,
    pub num_categories: usize,
    pub width: u32,
    pub height: u32,
    /// Object size range in pixels (roughly the side of the shape).
    pub min_size: f64,
    pub max_size: f64,
    pub max_objects: usize,
    /// Background distractor density in `[0, 1]`.
    pub clutter: f64,
    /// Minimum gap between object boxes in pixels.
    pub min_gap: f64,
    pub seed: u64,
    /// First image id; lets train and test splits use disjoint ids.
    #[serde(default)]
    pub first_id: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_images: 100,
            num_categories: 3,
            width: 160,
            height: 160,
            min_size: 8.0,
            max_size: 120.0,
            max_objects: 6,
            clutter: 0.3,
            min_gap: 2.0,
            seed: 0,
            first_id: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.num_categories > SHAPES.len() {
            return Err(Error::Config(format!(
                "num_categories must be in 1..={}, got {}",
                SHAPES.len(),
                self.num_categories
            )));
        }
        if !(self.min_size >= 2.0 && self.max_size >= self.min_size) {
            return Err(Error::Config(format!(
                "invalid size range {}..{}",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return Err(Error::Config("max_size exceeds the image".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [(Shape, &str, [f64; 3]); 6] = [
    (Shape::Disk, "disk", [220.0, 60.0, 50.0]),
    (Shape::Square, "square", [60.0, 180.0, 70.0]),
    (Shape::Triangle, "triangle", [60.0, 90.0, 220.0]),
    (Shape::Ring, "ring", [230.0, 200.0, 40.0]),
    (Shape::Cross, "cross", [200.0, 60.0, 200.0]),
    (Shape::Diamond, "diamond", [40.0, 200.0, 200.0]),
];

impl Shape {
    /// Membership in local coordinates scaled to `[-1, 1]²`.
    fn inside(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.4..=1.0).contains(&r2)
            }
            Shape::Cross => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

pub fn categories(n: usize) -> Vec<Category> {
    SHAPES
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, (_, name, _))| Category {
            id: i,
            name: name.to_string(),
            source_id: i as i64 + 1,
        })
        .collect()
}

struct Placed {
    shape: Shape,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
    shade: (f64, f64),
}

impl Placed {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (self.cos * dx + self.sin * dy) / self.a;
        let v = (-self.sin * dx + self.cos * dy) / self.b;
        (u, v)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        self.shape.inside(u, v)
    }

    fn reach(&self) -> f64 {
        self.a.max(self.b) * std::f64::consts::SQRT_2
    }
}

fn texture(rng: &mut ChaCha8Rng, w: u32, h: u32, clutter: f64) -> Vec<[f64; 3]> {
    let base = [
        rng.random_range(70.0..150.0),
        rng.random_range(70.0..150.0),
        rng.random_range(70.0..150.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(8.0..25.0),
            )
        })
        .collect();
    let mut px = vec![[0.0; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut t = 0.0;
            for &(freq, dir, phase, amp) in &waves {
                let s = (x as f64 * dir.cos() + y as f64 * dir.sin()) * freq + phase;
                t += amp * s.sin();
            }
            px[(y * w + x) as usize] = [base[0] + t, base[1] + t * 0.8, base[2] + t * 0.6];
        }
    }
    // desaturated distractor blobs
    let blobs = (clutter * 12.0).round() as usize;
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(3.0..14.0);
        let g = rng.random_range(60.0..200.0);
        for y in (cy - r).max(0.0) as u32..((cy + r).ceil() as u32).min(h) {
            for x in (cx - r).max(0.0) as u32..((cx + r).ceil() as u32).min(w) {
                let dx = (x as f64 + 0.5 - cx) / r;
                let dy = (y as f64 + 0.5 - cy) / r;
                if dx.abs().max(dy.abs()) <= 1.0 {
                    px[(y * w + x) as usize] = [g, g, g];
                }
            }
        }
    }
    px
}

/// Generates one image and its annotations.
pub fn synth_image(params: &SynthParams, index: usize) -> (ImageRecord, RgbImage) {
    let image_id = params.first_id + index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(object_seed(params.seed, image_id, u64::MAX));
    let (w, h) = (params.width, params.height);
    let mut px = texture(&mut rng, w, h, params.clutter);

    let count = rng.random_range(1..=params.max_objects);
    let mut sizes: Vec<f64> = (0..count)
        .map(|_| {
            let lo = params.min_size.ln();
            let hi = params.max_size.ln();
            rng.random_range(lo..=hi).exp()
        })
        .collect();
    sizes.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut placed: Vec<Placed> = Vec::new();
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    for s in sizes {
        let cat = rng.random_range(0..params.num_categories);
        let (shape, _, color) = SHAPES[cat];
        let aspect: f64 = rng.random_range(0.75..1.33);
        let a = s / 2.0 * aspect.sqrt();
        let b = s / 2.0 / aspect.sqrt();
        let theta: f64 = if shape == Shape::Disk || shape == Shape::Ring {
            rng.random_range(0.0..std::f64::consts::PI)
        } else {
            rng.random_range(-0.35..0.35)
        };
        let jitter = [
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
        ];
        let shade_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..40 {
            let mut obj = Placed {
                shape,
                cx: 0.0,
                cy: 0.0,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
                color: [color[0] + jitter[0], color[1] + jitter[1], color[2] + jitter[2]],
                shade: (shade_dir.cos(), shade_dir.sin()),
            };
            let reach = obj.reach().min(w.min(h) as f64 / 2.0 - 1.0);
            obj.cx = rng.random_range(reach..=(w as f64 - reach));
            obj.cy = rng.random_range(reach..=(h as f64 - reach));
            let bx = (obj.cx - reach, obj.cy - reach, obj.cx + reach, obj.cy + reach);
            let g = params.min_gap;
            let clash = boxes
                .iter()
                .any(|o| bx.0 < o.2 + g && o.0 < bx.2 + g && bx.1 < o.3 + g && o.1 < bx.3 + g);
            if !clash {
                boxes.push(bx);
                placed.push(obj);
                break;
            }
        }
    }

    let noise = Normal::new(0.0, 6.0).unwrap();
    let mut objects = Vec::new();
    for (i, obj) in placed.iter().enumerate() {
        let reach = obj.reach();
        let x0 = (obj.cx - reach).floor().max(0.0) as u32;
        let y0 = (obj.cy - reach).floor().max(0.0) as u32;
        let x1 = ((obj.cx + reach).ceil() as u32).min(w);
        let y1 = ((obj.cy + reach).ceil() as u32).min(h);
        let mut hits = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if obj.covers(fx, fy) {
                    let (u, v) = obj.local(fx, fy);
                    let t = 1.0 + 0.22 * (u * obj.shade.0 + v * obj.shade.1);
                    px[(y * w + x) as usize] = obj.color.map(|c| c * t);
                    hits.push((x, y));
                }
            }
        }
        if hits.is_empty() {
            continue;
        }
        let mx0 = hits.iter().map(|p| p.0).min().unwrap();
        let my0 = hits.iter().map(|p| p.1).min().unwrap();
        let mx1 = hits.iter().map(|p| p.0).max().unwrap() + 1;
        let my1 = hits.iter().map(|p| p.1).max().unwrap() + 1;
        let mut mask = Mask::new(mx0, my0, mx1 - mx0, my1 - my0);
        for &(x, y) in &hits {
            mask.set(x, y, true);
        }
        let cat = SHAPES.iter().position(|s| s.0 == obj.shape).unwrap();
        objects.push(ObjectAnnotation {
            object_id: image_id * 1000 + i as u64 + 1,
            category: cat,
            bbox: BBox::from_xywh(mx0 as f64, my0 as f64, (mx1 - mx0) as f64, (my1 - my0) as f64),
            mask: Some(mask),
            ignore: false,
        });
    }

    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = px[(y * w + x) as usize];
            let c = p.map(|v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x, y, Rgb(c));
        }
    }
    let record = ImageRecord {
        image_id,
        file_name: format!("{image_id:06}.png"),
        width: w,
        height: h,
        objects,
        coarse_points: Vec::new(),
    };
    (record, img)
}

/// Generates a whole dataset in memory.
pub fn synth_dataset(params: &SynthParams) -> Result<(Dataset, Vec<RgbImage>)> {
    params.validate()?;
    let mut images = Vec::with_capacity(params.num_images);
    let mut records = Vec::with_capacity(params.num_images);
    for i in 0..params.num_images {
        let (r, img) = synth_image(params, i);
        records.push(r);
        images.push(img);
    }
    let ds = Dataset {
        images: records,
        categories: categories(params.num_categories),
    };
    ds.validate()?;
    Ok((ds, images))
}

/// Writes `images/*.png` and `annotations.json` under `dir`.
pub fn write_synth(params: &SynthParams, dir: &Path) -> Result<Dataset> {
    let (ds, images) = synth_dataset(params)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (rec, img) in ds.images.iter().zip(&images) {
        img.save(img_dir.join(&rec.file_name))?;
    }
    save_dataset(&ds, &dir.join("annotations.json"))?;
    Ok(ds)
}
