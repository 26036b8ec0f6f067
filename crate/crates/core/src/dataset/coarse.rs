//! Simulated coarse annotation: a box-centered Gaussian truncated to the object.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CoarsePoint, Dataset, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const DEFAULT_RG_SIGMA: f64 = 0.25;
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarsePointOutcome {
    Sampled,
    /// Rejection sampling gave up; the mask centroid was used instead.
    CentroidFallback,
}

/// Draws one annotation point for `obj`.
///
/// Offsets are drawn per axis in box-normalized units, `u = (x - cx) / w`
/// and `v = (y - cy) / h`, each `N(0, sigma)`, and redrawn until the point
/// lands on the object (its mask, or its box when there is no mask).
pub fn generate_coarse_point<R: Rng + ?Sized>(
    obj: &ObjectAnnotation,
    rng: &mut R,
    sigma: f64,
) -> Result<(CoarsePoint, CoarsePointOutcome)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    if !(obj.bbox.w > 0.0 && obj.bbox.h > 0.0) {
        return Err(Error::Input(format!(
            "object {} has a degenerate box",
            obj.object_id
        )));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let b = obj.bbox;
    for _ in 0..MAX_REJECTIONS {
        let u: f64 = normal.sample(rng);
        let v: f64 = normal.sample(rng);
        let p = Point::new(b.cx + u * b.w, b.cy + v * b.h);
        if obj.covers(p) {
            return Ok((point(obj, p), CoarsePointOutcome::Sampled));
        }
    }
    let fallback = obj
        .mask
        .as_ref()
        .and_then(|m| m.centroid())
        .unwrap_or_else(|| b.center());
    log::warn!(
        "object {}: no accepted draw after {MAX_REJECTIONS} tries, using mask centroid",
        obj.object_id
    );
    Ok((point(obj, fallback), CoarsePointOutcome::CentroidFallback))
}

fn point(obj: &ObjectAnnotation, p: Point) -> CoarsePoint {
    CoarsePoint {
        object_id: obj.object_id,
        category: obj.category,
        position: p,
        trace: None,
    }
}

/// Per-object seed so each point depends only on `(seed, image, object)`.
pub fn object_seed(seed: u64, image_id: u64, object_id: u64) -> u64 {
    let mut z = seed
        ^ image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ object_id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replaces every image's coarse points with one fresh draw per labeled object.
pub fn generate_coarse_points(dataset: &mut Dataset, seed: u64, sigma: f64) -> Result<usize> {
    let mut fallbacks = 0;
    for img in &mut dataset.images {
        let mut points = Vec::with_capacity(img.objects.len());
        for obj in img.objects.iter().filter(|o| !o.ignore) {
            let mut rng = ChaCha8Rng::seed_from_u64(object_seed(seed, img.image_id, obj.object_id));
            let (cp, outcome) = generate_coarse_point(obj, &mut rng, sigma)?;
            if outcome == CoarsePointOutcome::CentroidFallback {
                fallbacks += 1;
            }
            points.push(cp);
        }
        img.coarse_points = points;
    }
    Ok(fallbacks)
}
