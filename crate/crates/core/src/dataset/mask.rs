//! Binary object masks stored as a crop window over the image pixel grid.

use serde::{Deserialize, Serialize};

use crate::geometry::Point;

/// Mask pixels inside the window `[x0, x0+width) × [y0, y0+height)`; pixels
/// outside the window are off. Pixel `(col, row)` covers the unit square with
/// top-left corner `(col, row)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(x0: u32, y0: u32, width: u32, height: u32) -> Self {
        Mask {
            x0,
            y0,
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    /// Builds a window mask from a predicate on absolute pixel coordinates.
    pub fn from_fn(
        x0: u32,
        y0: u32,
        width: u32,
        height: u32,
        mut on: impl FnMut(u32, u32) -> bool,
    ) -> Self {
        let mut mask = Mask::new(x0, y0, width, height);
        for row in 0..height {
            for col in 0..width {
                mask.bits[(row * width + col) as usize] = on(x0 + col, y0 + row);
            }
        }
        mask
    }

    pub fn get(&self, col: i64, row: i64) -> bool {
        let (c, r) = (col - self.x0 as i64, row - self.y0 as i64);
        if c < 0 || r < 0 || c >= self.width as i64 || r >= self.height as i64 {
            return false;
        }
        self.bits[(r as u64 * self.width as u64 + c as u64) as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: bool) {
        let (c, r) = (col.wrapping_sub(self.x0), row.wrapping_sub(self.y0));
        if c < self.width && r < self.height {
            self.bits[(r * self.width + c) as usize] = value;
        }
    }

    /// Whether the pixel containing `p` is on.
    pub fn contains(&self, p: Point) -> bool {
        self.get(p.x.floor() as i64, p.y.floor() as i64)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Mean of the on-pixel centers.
    pub fn centroid(&self) -> Option<Point> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for row in 0..self.height {
            for col in 0..self.width {
                if self.bits[(row * self.width + col) as usize] {
                    sx += (self.x0 + col) as f64 + 0.5;
                    sy += (self.y0 + row) as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
    }

    /// Clears every pixel outside the absolute pixel rectangle `[x0, x1) × [y0, y1)`.
    pub fn restrict_to(&mut self, x0: u32, y0: u32, x1: u32, y1: u32) {
        for row in 0..self.height {
            for col in 0..self.width {
                let (ax, ay) = (self.x0 + col, self.y0 + row);
                if ax < x0 || ax >= x1 || ay < y0 || ay >= y1 {
                    self.bits[(row * self.width + col) as usize] = false;
                }
            }
        }
    }

    /// Uncompressed COCO run-length counts over the full image, column-major.
    pub fn to_rle_counts(&self, image_width: u32, image_height: u32) -> Vec<u64> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for col in 0..image_width {
            for row in 0..image_height {
                let v = self.get(col as i64, row as i64);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    /// Decodes column-major COCO counts, keeping only the given window.
    pub fn from_rle_counts(
        counts: &[u64],
        image_width: u32,
        image_height: u32,
        window: (u32, u32, u32, u32),
    ) -> Result<Self, String> {
        let total: u64 = counts.iter().sum();
        let expected = image_width as u64 * image_height as u64;
        if total != expected {
            return Err(format!(
                "RLE counts sum to {total}, expected {expected} for {image_width}x{image_height}"
            ));
        }
        let (x0, y0, w, h) = window;
        let mut mask = Mask::new(x0, y0, w, h);
        let mut idx = 0u64;
        let mut value = false;
        for &run in counts {
            if value {
                for k in idx..idx + run {
                    let col = (k / image_height as u64) as u32;
                    let row = (k % image_height as u64) as u32;
                    mask.set(col, row, true);
                }
            }
            idx += run;
            value = !value;
        }
        Ok(mask)
    }
}

/// Decodes the compressed COCO RLE string into run counts.
pub fn rle_counts_from_string(s: &str) -> Result<Vec<u64>, String> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0;
        let mut more = true;
        while more {
            let b = *bytes
                .get(i)
                .ok_or_else(|| "truncated RLE string".to_string())?;
            if b < 48 {
                return Err(format!("invalid RLE byte {b}"));
            }
            let c = (b - 48) as i64;
            i += 1;
            x |= (c & 0x1f) << shift;
            more = (c & 0x20) != 0;
            shift += 5;
        }
        if x & (1 << (shift - 1)) != 0 {
            x |= !0i64 << shift;
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| format!("negative RLE count {c}")))
        .collect()
}

/// Even-odd point-in-polygon test; `poly` is `[x0, y0, x1, y1, ...]`.
pub fn point_in_polygon(poly: &[f64], x: f64, y: f64) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes polygons into a window: a pixel is on when its center is inside any polygon.
pub fn rasterize_polygons(polys: &[Vec<f64>], window: (u32, u32, u32, u32)) -> Mask {
    let (x0, y0, w, h) = window;
    Mask::from_fn(x0, y0, w, h, |col, row| {
        let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
        polys.iter().any(|p| point_in_polygon(p, cx, cy))
    })
}
