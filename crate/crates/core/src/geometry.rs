//! Point bags and negative point sets on the feature grid.
//!
//! All coordinates here are feature-map coordinates: the cell at column `x`
//! and row `y` sits at `(x, y)`, and a map of extent `h × w` covers the
//! closed rectangle `[0, w-1] × [0, h-1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn scale(self, factor: f64) -> Point {
        Point::new(self.x * factor, self.y * factor)
    }
}

/// Height and width of a feature map, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapExtent {
    pub height: usize,
    pub width: usize,
}

impl MapExtent {
    pub const fn new(height: usize, width: usize) -> Self {
        MapExtent { height, width }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width as f64 - 1.0)
            && p.y <= (self.height as f64 - 1.0)
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(0.0, self.width as f64 - 1.0),
            p.y.clamp(0.0, self.height as f64 - 1.0),
        )
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Layout of the sampling rings around a center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingShape {
    #[default]
    Circle,
    /// Rectangle with width:height ratio `aspect` and the same area as the
    /// square of half-extent `r`.
    Rect { aspect: f64 },
}

impl SamplingShape {
    /// Points on ring `r` around `center`.
    pub fn ring(&self, center: Point, r: u32, u0: u32) -> Vec<Point> {
        match *self {
            SamplingShape::Circle => circle_points(center, r, u0),
            SamplingShape::Rect { aspect } => rect_points(center, r, u0, aspect),
        }
    }

    /// Whether `p` lies inside the closed sampling region of the given radius.
    pub fn contains(&self, center: Point, radius: u32, p: Point) -> bool {
        let r = radius as f64;
        match *self {
            SamplingShape::Circle => p.dist(center) <= r,
            SamplingShape::Rect { aspect } => {
                let (hx, hy) = rect_half_extents(r, aspect);
                (p.x - center.x).abs() <= hx && (p.y - center.y).abs() <= hy
            }
        }
    }
}

/// Sampling center and integer radius of one object, in feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingRegion {
    pub object_id: u64,
    pub category: usize,
    pub center: Point,
    pub radius: u32,
}

impl SamplingRegion {
    pub fn new(object_id: u64, category: usize, center: Point, radius: u32) -> Self {
        SamplingRegion {
            object_id,
            category,
            center,
            radius: radius.max(1),
        }
    }

    /// Region from a real-valued radius: floored, never below one ring.
    pub fn from_real_radius(object_id: u64, category: usize, center: Point, radius: f64) -> Self {
        let floored = if radius.is_finite() && radius >= 1.0 {
            radius.floor() as u32
        } else {
            1
        };
        SamplingRegion::new(object_id, category, center, floored)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointBag {
    pub object_id: u64,
    pub category: usize,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub category: usize,
    /// Integer grid points as `(x, y)`.
    pub points: Vec<(usize, usize)>,
}

/// `r * u0` points at equal angular steps on the circle of radius `r`,
/// starting at angle zero (the `+x` direction).
pub fn circle_points(center: Point, r: u32, u0: u32) -> Vec<Point> {
    let n = r * u0;
    let radius = r as f64;
    (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            Point::new(
                center.x + radius * theta.cos(),
                center.y + radius * theta.sin(),
            )
        })
        .collect()
}

fn rect_half_extents(r: f64, aspect: f64) -> (f64, f64) {
    let s = aspect.sqrt();
    (r * s, r / s)
}

/// `r * u0` points at equal arc-length steps on the perimeter of a rectangle
/// with half-extents `(r·√aspect, r/√aspect)`, starting at `(+hx, 0)` and
/// running counter-clockwise in the `+y` direction first.
pub fn rect_points(center: Point, r: u32, u0: u32, aspect: f64) -> Vec<Point> {
    let n = r * u0;
    let (hx, hy) = rect_half_extents(r as f64, aspect);
    let perimeter = 4.0 * (hx + hy);
    let step = perimeter / n as f64;
    (0..n)
        .map(|i| {
            let (dx, dy) = rect_perimeter_at(hx, hy, i as f64 * step);
            Point::new(center.x + dx, center.y + dy)
        })
        .collect()
}

fn rect_perimeter_at(hx: f64, hy: f64, mut s: f64) -> (f64, f64) {
    // right edge, upper half
    if s <= hy {
        return (hx, s);
    }
    s -= hy;
    if s <= 2.0 * hx {
        return (hx - s, hy);
    }
    s -= 2.0 * hx;
    if s <= 2.0 * hy {
        return (-hx, hy - s);
    }
    s -= 2.0 * hy;
    if s <= 2.0 * hx {
        return (-hx + s, -hy);
    }
    s -= 2.0 * hx;
    (hx, -hy + s)
}

/// Union of rings `1..=radius` around the region center, restricted to the map.
pub fn build_bag(region: &SamplingRegion, u0: u32, extent: MapExtent) -> Result<PointBag> {
    build_bag_shaped(region, u0, extent, SamplingShape::Circle)
}

pub fn build_bag_shaped(
    region: &SamplingRegion,
    u0: u32,
    extent: MapExtent,
    shape: SamplingShape,
) -> Result<PointBag> {
    let points: Vec<Point> = (1..=region.radius)
        .flat_map(|r| shape.ring(region.center, r, u0))
        .filter(|p| extent.contains(*p))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyBag {
            object_id: region.object_id,
        });
    }
    Ok(PointBag {
        object_id: region.object_id,
        category: region.category,
        points,
    })
}

/// Upper bound on the bag size, reached when no point leaves the map.
pub fn full_bag_len(radius: u32, u0: u32) -> usize {
    (u0 as usize) * (radius as usize) * (radius as usize + 1) / 2
}

/// All integer grid points outside every sampling region of `category`.
pub fn build_negatives(
    category: usize,
    regions: &[SamplingRegion],
    extent: MapExtent,
) -> NegativeSet {
    build_negatives_shaped(category, regions, extent, SamplingShape::Circle)
}

pub fn build_negatives_shaped(
    category: usize,
    regions: &[SamplingRegion],
    extent: MapExtent,
    shape: SamplingShape,
) -> NegativeSet {
    let own: Vec<&SamplingRegion> = regions.iter().filter(|r| r.category == category).collect();
    let mut points = Vec::new();
    for y in 0..extent.height {
        for x in 0..extent.width {
            let p = Point::new(x as f64, y as f64);
            if own.iter().all(|r| !shape.contains(r.center, r.radius, p)) {
                points.push((x, y));
            }
        }
    }
    NegativeSet { category, points }
}
