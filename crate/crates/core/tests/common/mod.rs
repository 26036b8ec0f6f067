//! Fixtures, independent reference implementations and the numeric checks
//! shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;

use cpr_core::dataset::{generate_coarse_points, Dataset};
use cpr_core::eval::{match_image, EvalGt, EvalPred, Verdict};
use cpr_core::features::{ConvExtractor, ExtractorConfig, FeatureExtractor, FeatureMap, ImageTensor};
use cpr_core::geometry::{
    build_bag, build_negatives, circle_points, full_bag_len, MapExtent, Point, SamplingRegion,
};
use cpr_core::localizer::{
    anchors, assign_targets, localizer_loss, point_nms, Assignment, GtPoint, LocalizedObject,
    LocalizerConfig, ProposalSet,
};
use cpr_core::refine::{
    cpr_refine, cpr_training_loss, cprpp_infer_image, cprpp_training_loss, feature_labels,
    new_refiner, train_refiner, CascadeConfig, CascadeMode, Objective, PointLabel, TrainSample,
    TrainSchedule,
};
use cpr_core::refiner::{
    bag_forward, loss_ann, loss_cpr, loss_mil, loss_neg, loss_var, variance_supervision, CprHead,
    CprHeadGrad, CprLossConfig, HeadGradSink, Linear, LinearGrad, NegNormalization, ObjectLabel,
    VarReduction, VarTarget,
};
use cpr_core::synth::{synth_dataset, SynthParams};
use cpr_core::nn::AdamConfig;
use cpr_core::features::FeatureGrad;
use cpr_core::geometry::PointBag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let mut f = FeatureMap::zeros(h, w, d, 8);
    for v in &mut f.data {
        *v = rng.random_range(-1.0f32..1.0);
    }
    f
}

pub fn random_linear(rng: &mut impl Rng, in_dim: usize, out_dim: usize, scale: f64) -> Linear {
    Linear {
        in_dim,
        out_dim,
        weight: (0..in_dim * out_dim).map(|_| rng.random_range(-scale..scale)).collect(),
        bias: (0..out_dim).map(|_| rng.random_range(-scale..scale)).collect(),
    }
}

pub fn random_head(rng: &mut impl Rng, d: usize, k: usize) -> CprHead {
    CprHead {
        cls: random_linear(rng, d, k, 1.0),
        ins: random_linear(rng, d, k, 1.0),
    }
}

/// `m` labels with annotated points inside the map and radii in `1..=r_max`.
pub fn random_instance(
    rng: &mut impl Rng,
    extent: MapExtent,
    m: usize,
    k: usize,
    r_max: u32,
) -> (Vec<ObjectLabel>, Vec<SamplingRegion>) {
    let mut labels = Vec::with_capacity(m);
    let mut regions = Vec::with_capacity(m);
    for j in 0..m {
        let p = Point::new(
            rng.random_range(0.0..(extent.width - 1) as f64),
            rng.random_range(0.0..(extent.height - 1) as f64),
        );
        let c = rng.random_range(0..k);
        labels.push(ObjectLabel {
            object_id: j as u64 + 1,
            category: c,
            annotated: p,
        });
        regions.push(SamplingRegion::new(j as u64 + 1, c, p, rng.random_range(1..=r_max)));
    }
    (labels, regions)
}

// ---------------------------------------------------------------------------
// Reference implementations, written without the library's helpers.

pub fn ref_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn ref_focal(s: f64, positive: bool, gamma: f64) -> f64 {
    let s = s.max(1e-6).min(1.0 - 1e-6);
    if positive {
        -(1.0 - s).powf(gamma) * s.ln()
    } else {
        -s.powf(gamma) * (1.0 - s).ln()
    }
}

/// Tent-weighted sum over every lattice cell.
pub fn ref_feature(f: &FeatureMap, p: Point) -> Vec<f64> {
    let mut out = vec![0.0; f.dim];
    for y in 0..f.height {
        for x in 0..f.width {
            let w = (1.0 - (p.x - x as f64).abs()).max(0.0) * (1.0 - (p.y - y as f64).abs()).max(0.0);
            if w > 0.0 {
                let o = (y * f.width + x) * f.dim;
                for c in 0..f.dim {
                    out[c] += w * f.data[o + c] as f64;
                }
            }
        }
    }
    out
}

pub fn ref_linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    let mut out = l.bias.clone();
    for o in 0..l.out_dim {
        for i in 0..l.in_dim {
            out[o] += l.weight[o * l.in_dim + i] * x[i];
        }
    }
    out
}

pub fn ref_ring(c: Point, r: u32, u0: u32) -> Vec<Point> {
    let n = r * u0;
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            Point::new(c.x + r as f64 * a.cos(), c.y + r as f64 * a.sin())
        })
        .collect()
}

pub fn ref_bag(region: &SamplingRegion, u0: u32, extent: MapExtent) -> Vec<Point> {
    let mut out = Vec::new();
    for r in 1..=region.radius {
        for p in ref_ring(region.center, r, u0) {
            if p.x >= 0.0 && p.y >= 0.0 && p.x <= (extent.width - 1) as f64 && p.y <= (extent.height - 1) as f64 {
                out.push(p);
            }
        }
    }
    out
}

/// Bag score vector of one object.
pub fn ref_bag_score(f: &FeatureMap, bag: &[Point], head: &CprHead) -> Vec<f64> {
    let k = head.cls.out_dim;
    let feats: Vec<Vec<f64>> = bag.iter().map(|p| ref_feature(f, *p)).collect();
    let mut out = vec![0.0; k];
    for c in 0..k {
        let z: Vec<f64> = feats.iter().map(|x| ref_linear(&head.ins, x)[c]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (x, zi) in feats.iter().zip(&z) {
            out[c] += ref_sigmoid(ref_linear(&head.cls, x)[c]) * zi.exp() / denom;
        }
    }
    out
}

pub fn ref_loss_mil(f: &FeatureMap, regions: &[SamplingRegion], head: &CprHead, u0: u32, gamma: f64) -> f64 {
    let mut total = 0.0;
    for r in regions {
        let s = ref_bag_score(f, &ref_bag(r, u0, f.extent()), head);
        total += (0..s.len()).map(|c| ref_focal(s[c], c == r.category, gamma)).sum::<f64>();
    }
    total / regions.len() as f64
}

pub fn ref_loss_ann(f: &FeatureMap, labels: &[ObjectLabel], head: &CprHead, gamma: f64) -> f64 {
    let mut total = 0.0;
    for l in labels {
        let z = ref_linear(&head.cls, &ref_feature(f, l.annotated));
        total += (0..z.len()).map(|c| ref_focal(ref_sigmoid(z[c]), c == l.category, gamma)).sum::<f64>();
    }
    total / labels.len() as f64
}

pub fn ref_loss_neg(f: &FeatureMap, regions: &[SamplingRegion], head: &CprHead, gamma: f64, per_point: bool) -> f64 {
    let k = head.cls.out_dim;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..f.height {
        for x in 0..f.width {
            let p = Point::new(x as f64, y as f64);
            let z = ref_linear(&head.cls, &ref_feature(f, p));
            for c in 0..k {
                let outside = regions
                    .iter()
                    .filter(|r| r.category == c)
                    .all(|r| ((p.x - r.center.x).powi(2) + (p.y - r.center.y).powi(2)).sqrt() > r.radius as f64);
                if outside {
                    total += ref_focal(ref_sigmoid(z[c]), false, gamma);
                    count += 1;
                }
            }
        }
    }
    let norm = if per_point { count.max(1) } else { regions.len().max(1) };
    total / norm as f64
}

pub fn ref_loss_cpr(f: &FeatureMap, labels: &[ObjectLabel], regions: &[SamplingRegion], head: &CprHead) -> f64 {
    ref_loss_mil(f, regions, head, 8, 2.0)
        + 0.5 * ref_loss_ann(f, labels, head, 2.0)
        + 3.0 * ref_loss_neg(f, regions, head, 2.0, false)
}

pub fn ref_var_target(targets: &[VarTarget], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * w * k];
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let best = targets
                    .iter()
                    .filter(|t| t.category == c)
                    .map(|t| (-((x as f64 - t.center.x).hypot(y as f64 - t.center.y)) / t.sigma).exp())
                    .fold(0.0, f64::max);
                g[(y * w + x) * k + c] = best;
            }
        }
    }
    g
}

pub fn ref_loss_var(f: &FeatureMap, var: &Linear, g: &[f64], mean: bool) -> f64 {
    let k = var.out_dim;
    let mut total = 0.0;
    for y in 0..f.height {
        for x in 0..f.width {
            let z = ref_linear(var, &ref_feature(f, Point::new(x as f64, y as f64)));
            for c in 0..k {
                let s = ref_sigmoid(z[c]).max(1e-6).min(1.0 - 1e-6);
                let t = g[(y * f.width + x) * k + c];
                total += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            }
        }
    }
    if mean {
        total / g.len() as f64
    } else {
        total
    }
}

pub fn ref_localizer_loss(p: &ProposalSet, labels: &[Option<Assignment>], gamma: f64, lambda: f64) -> f64 {
    let k = p.num_categories;
    let pos = labels.iter().flatten().count().max(1) as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..p.len() {
        for c in 0..k {
            let is_pos = matches!(labels[i], Some(a) if a.category == c);
            cls += ref_focal(ref_sigmoid(p.logits[i * k + c]), is_pos, gamma);
        }
        if let Some(a) = labels[i] {
            for d in 0..2 {
                let e = (p.offsets[i][d] - a.target[d]).abs();
                reg += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
            }
        }
    }
    cls / pos + lambda * reg / pos
}

/// Square-box IoU from corner coordinates.
pub fn ref_box_iou(a: (f64, f64), b: (f64, f64), size: f64) -> f64 {
    let h = size / 2.0;
    let ix = ((a.0 + h).min(b.0 + h) - (a.0 - h).max(b.0 - h)).max(0.0);
    let iy = ((a.1 + h).min(b.1 + h) - (a.1 - h).max(b.1 - h)).max(0.0);
    let inter = ix * iy;
    inter / (size * size + size * size - inter)
}

/// Fixed-point suppression: start with everything kept and re-evaluate every
/// point against all higher-priority survivors until nothing changes.
pub fn ref_nms(points: &[LocalizedObject], size: f64, thr: f64) -> Vec<LocalizedObject> {
    let n = points.len();
    let before = |i: usize, j: usize| points[j].score > points[i].score || (points[j].score == points[i].score && j < i);
    let mut kept = vec![true; n];
    loop {
        let next: Vec<bool> = (0..n)
            .map(|i| {
                !(0..n).any(|j| {
                    j != i
                        && kept[j]
                        && before(i, j)
                        && points[j].category == points[i].category
                        && ref_box_iou((points[i].x, points[i].y), (points[j].x, points[j].y), size) > thr
                })
            })
            .collect();
        if next == kept {
            break;
        }
        kept = next;
    }
    let mut out: Vec<(usize, LocalizedObject)> = points.iter().copied().enumerate().filter(|(i, _)| kept[*i]).collect();
    out.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, p)| p).collect()
}

fn ref_dist(p: Point, g: &EvalGt) -> f64 {
    (((p.x - g.bbox.cx) / g.bbox.w).powi(2) + ((p.y - g.bbox.cy) / g.bbox.h).powi(2)).sqrt()
}

/// Enumerates every injective assignment of predictions to regular ground
/// truths within `τ` and keeps the lexicographically best one: earlier
/// (higher-score) predictions first prefer being matched, then the smaller
/// distance, then the lower ground-truth index. Unmatched predictions are
/// ignored when an ignore region lies within `τ`.
pub fn ref_match(preds: &[EvalPred], gts: &[EvalGt], tau: f64) -> Vec<(Verdict, Option<usize>)> {
    fn key(choice: &[Option<usize>], preds: &[EvalPred], gts: &[EvalGt]) -> Vec<(u8, f64, usize)> {
        choice
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Some(g) => (0, ref_dist(preds[i].point, &gts[*g]), *g),
                None => (1, 0.0, 0),
            })
            .collect()
    }
    fn better(a: &[(u8, f64, usize)], b: &[(u8, f64, usize)]) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 < y.0;
            }
            if x.1 != y.1 {
                return x.1 < y.1;
            }
            if x.2 != y.2 {
                return x.2 < y.2;
            }
        }
        false
    }
    fn search(
        i: usize,
        choice: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        preds: &[EvalPred],
        gts: &[EvalGt],
        tau: f64,
        best: &mut Option<(Vec<(u8, f64, usize)>, Vec<Option<usize>>)>,
    ) {
        if i == preds.len() {
            let k = key(choice, preds, gts);
            if best.as_ref().is_none_or(|(bk, _)| better(&k, bk)) {
                *best = Some((k, choice.clone()));
            }
            return;
        }
        for g in 0..gts.len() {
            if !used[g] && !gts[g].ignore && ref_dist(preds[i].point, &gts[g]) < tau {
                used[g] = true;
                choice.push(Some(g));
                search(i + 1, choice, used, preds, gts, tau, best);
                choice.pop();
                used[g] = false;
            }
        }
        choice.push(None);
        search(i + 1, choice, used, preds, gts, tau, best);
        choice.pop();
    }
    let mut best = None;
    search(0, &mut Vec::new(), &mut vec![false; gts.len()], preds, gts, tau, &mut best);
    let (_, choice) = best.expect("at least the empty assignment");
    choice
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(g) => (Verdict::Tp, Some(*g)),
            None => {
                let ign = (0..gts.len())
                    .filter(|&g| gts[g].ignore && ref_dist(preds[i].point, &gts[g]) < tau)
                    .min_by(|&a, &b| ref_dist(preds[i].point, &gts[a]).partial_cmp(&ref_dist(preds[i].point, &gts[b])).unwrap());
                match ign {
                    Some(g) => (Verdict::Ignored, Some(g)),
                    None => (Verdict::Fp, None),
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Largest relative error between `analytic` and central differences of
/// `loss` over `params`; `|a - n| / max(|a|, |n|, floor)` per component.
pub fn fd_max_rel_error(
    params: &mut [f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

pub fn head_params(h: &CprHead) -> Vec<f64> {
    [&h.cls.weight, &h.cls.bias, &h.ins.weight, &h.ins.bias]
        .into_iter()
        .flatten()
        .copied()
        .collect()
}

pub fn set_head_params(h: &mut CprHead, p: &[f64]) {
    let mut it = p.iter().copied();
    for v in h
        .cls
        .weight
        .iter_mut()
        .chain(h.cls.bias.iter_mut())
        .chain(h.ins.weight.iter_mut())
        .chain(h.ins.bias.iter_mut())
    {
        *v = it.next().unwrap();
    }
}

pub fn head_grad_flat(g: &CprHeadGrad) -> Vec<f64> {
    [&g.cls.weight, &g.cls.bias, &g.ins.weight, &g.ins.bias]
        .into_iter()
        .flatten()
        .copied()
        .collect()
}

// ---------------------------------------------------------------------------
// Checks with pinned tolerances, shared with the acceptance runner.

pub type Check = Result<String, String>;

pub fn check_bag_cardinality(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut interior = 0;
    for t in 0..n {
        let extent = MapExtent::new(rng.random_range(1..40), rng.random_range(1..40));
        let center = Point::new(
            rng.random_range(-3.0..extent.width as f64 + 2.0),
            rng.random_range(-3.0..extent.height as f64 + 2.0),
        );
        let r = rng.random_range(1..=12);
        let u0 = rng.random_range(1..=10);
        let region = SamplingRegion::new(1, 0, center, r);
        let full = full_bag_len(r, u0);
        if full != (u0 * r * (r + 1) / 2) as usize {
            return Err(format!("closed form mismatch at r={r} u0={u0}"));
        }
        let excluded = (1..=r)
            .flat_map(|ri| ref_ring(center, ri, u0))
            .filter(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (extent.width - 1) as f64 && p.y <= (extent.height - 1) as f64))
            .count();
        let expected = full - excluded;
        let got = match build_bag(&region, u0, extent) {
            Ok(b) => b.points.len(),
            Err(_) => 0,
        };
        if got != expected {
            return Err(format!("case {t}: |bag| = {got}, expected {expected}"));
        }
        if excluded == 0 {
            interior += 1;
        }
    }
    Ok(format!("{n} regions, {interior} fully inside the map"))
}

pub fn check_disjointness(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut checked = 0usize;
    for t in 0..n {
        let extent = MapExtent::new(rng.random_range(4..30), rng.random_range(4..30));
        let k = rng.random_range(1..4);
        let m = rng.random_range(1..8);
        let (_, regions) = random_instance(&mut rng, extent, m, k, 6);
        for c in 0..k {
            let negs = build_negatives(c, &regions, extent);
            let neg: std::collections::HashSet<(usize, usize)> = negs.points.iter().copied().collect();
            for r in regions.iter().filter(|r| r.category == c) {
                let bag = build_bag(r, 8, extent).map_err(|e| format!("case {t}: {e}"))?;
                for p in &bag.points {
                    checked += 1;
                    if p.dist(r.center) > r.radius as f64 + 1e-6 {
                        return Err(format!("case {t}: bag point {p:?} outside its disc"));
                    }
                    if p.x.fract() == 0.0 && p.y.fract() == 0.0 && neg.contains(&(p.x as usize, p.y as usize)) {
                        return Err(format!("case {t}: bag point {p:?} is also a negative"));
                    }
                }
                for &(x, y) in &negs.points {
                    if Point::new(x as f64, y as f64).dist(r.center) <= r.radius as f64 {
                        return Err(format!("case {t}: negative ({x}, {y}) inside a disc"));
                    }
                }
            }
        }
    }
    Ok(format!("{n} layouts, {checked} bag points"))
}

pub fn check_ring_distance(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = Point::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let r = rng.random_range(1..=30);
        let u0 = rng.random_range(1..=16);
        let pts = circle_points(c, r, u0);
        if pts.len() != (r * u0) as usize {
            return Err(format!("ring r={r} u0={u0} has {} points", pts.len()));
        }
        for p in pts {
            worst = worst.max((p.dist(c) - r as f64).abs());
        }
    }
    if worst < 1e-9 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e} >= 1e-9"))
    }
}

pub fn check_softmax(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let f = random_map(&mut rng, 8, 8, 4);
        let k = rng.random_range(1..4);
        let head = random_head(&mut rng, 4, k);
        let (_, regions) = random_instance(&mut rng, f.extent(), 1, k, 4);
        let bag = build_bag(&regions[0], 8, f.extent()).unwrap();
        let s = bag_forward(&f, &bag, &head).unwrap();
        for c in 0..k {
            let total: f64 = (0..s.len()).map(|p| s.ins_at(p)[c]).sum();
            worst = worst.max((total - 1.0).abs());
            if !(0.0..=1.0).contains(&s.bag[c]) {
                return Err(format!("bag score {} outside [0, 1]", s.bag[c]));
            }
        }
    }
    if worst <= 1e-5 {
        Ok(format!("{n} bags, max |sum - 1| = {worst:.1e}"))
    } else {
        Err(format!("max |sum - 1| = {worst:.3e}"))
    }
}

/// Largest absolute gap between each loss and its reference over `n` instances.
pub fn check_loss_oracles(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, a: f64, b: f64| -> Result<(), String> {
        let gap = (a - b).abs();
        worst = worst.max(gap);
        if gap > 1e-6 || !a.is_finite() || a < 0.0 {
            Err(format!("{name}: {a} vs reference {b}"))
        } else {
            Ok(())
        }
    };
    for _ in 0..n {
        let (h, w, d) = (rng.random_range(3..8), rng.random_range(3..8), rng.random_range(1..4));
        let f = random_map(&mut rng, h, w, d);
        let k = rng.random_range(1..3);
        let head = random_head(&mut rng, d, k);
        let m = rng.random_range(1..4);
        let (labels, regions) = random_instance(&mut rng, f.extent(), m, k, 3);
        let bags: Vec<PointBag> = regions.iter().map(|r| build_bag(r, 8, f.extent()).unwrap()).collect();
        let negs: Vec<_> = (0..k).map(|c| build_negatives(c, &regions, f.extent())).collect();
        note("mil", loss_mil(&f, &bags, &head, 2.0, None).unwrap(), ref_loss_mil(&f, &regions, &head, 8, 2.0))?;
        note("ann", loss_ann(&f, &labels, &head, 2.0, None).unwrap(), ref_loss_ann(&f, &labels, &head, 2.0))?;
        for (norm, per_point) in [(NegNormalization::Objects, false), (NegNormalization::Points, true)] {
            note(
                "neg",
                loss_neg(&f, &negs, &head, 2.0, m, norm, None).unwrap(),
                ref_loss_neg(&f, &regions, &head, 2.0, per_point),
            )?;
        }
        let cfg = CprLossConfig::default();
        note(
            "cpr",
            loss_cpr(&f, &labels, &regions, &head, &cfg, None).unwrap().total,
            ref_loss_cpr(&f, &labels, &regions, &head),
        )?;
        let var = random_linear(&mut rng, d, k, 1.0);
        let targets: Vec<VarTarget> = regions
            .iter()
            .map(|r| VarTarget {
                category: r.category,
                center: r.center,
                sigma: r.radius as f64,
            })
            .collect();
        let g = variance_supervision(&targets, h, w, k);
        let g_ref = ref_var_target(&targets, h, w, k);
        for (a, b) in g.iter().zip(&g_ref) {
            note("var target", *a, *b)?;
        }
        note("var sum", loss_var(&f, &var, &g, VarReduction::Sum, None), ref_loss_var(&f, &var, &g_ref, false))?;
        note("var mean", loss_var(&f, &var, &g, VarReduction::Mean, None), ref_loss_var(&f, &var, &g_ref, true))?;
        let (p, labels) = random_proposals(&mut rng, k);
        let cfg = LocalizerConfig::default();
        note(
            "localizer",
            localizer_loss(&p, &labels, &cfg, false).0.total,
            ref_localizer_loss(&p, &labels, cfg.gamma, cfg.lambda_reg),
        )?;
    }
    Ok(format!("{n} instances, max |gap| = {worst:.1e}"))
}

/// A small proposal set with assigned targets, offsets away from the smooth-L1 kink.
pub fn random_proposals(rng: &mut impl Rng, k: usize) -> (ProposalSet, Vec<Option<Assignment>>) {
    let (h, w) = (2, 3);
    let a = anchors(h, w, 8);
    let gts: Vec<GtPoint> = (0..2)
        .map(|i| GtPoint {
            object_id: i + 1,
            category: rng.random_range(0..k),
            position: Point::new(rng.random_range(0.0..16.0), rng.random_range(0.0..8.0)),
        })
        .collect();
    let labels = assign_targets(&a, &gts, 2);
    let mut offsets = Vec::new();
    for l in &labels {
        let mut o = [0.0; 2];
        for d in 0..2 {
            let t = l.map_or(0.0, |l| l.target[d]);
            let mut e: f64 = rng.random_range(-2.5..2.5);
            if (e.abs() - 1.0).abs() < 0.05 {
                e *= 0.5;
            }
            o[d] = t + e;
        }
        offsets.push(o);
    }
    let p = ProposalSet {
        height: h,
        width: w,
        stride: 8,
        num_categories: k,
        anchors: a,
        logits: (0..h * w * k).map(|_| rng.random_range(-3.0..3.0)).collect(),
        offsets,
    };
    (p, labels)
}

#[derive(Debug)]
pub struct GradReport {
    pub cpr: f64,
    pub var: f64,
    pub localizer: f64,
    pub params: [usize; 3],
}

/// Worst relative finite-difference error of each loss over `n` instances.
pub fn check_gradients(n: usize, seed: u64) -> GradReport {
    let mut rng = seeded(seed);
    let (h_step, floor) = (1e-5, 1e-6);
    let mut rep = GradReport {
        cpr: 0.0,
        var: 0.0,
        localizer: 0.0,
        params: [0; 3],
    };
    for _ in 0..n {
        // L_cpr: d = 3, K = 2 → 16 head parameters.
        let f = random_map(&mut rng, 6, 6, 3);
        let mut head = random_head(&mut rng, 3, 2);
        let (labels, regions) = random_instance(&mut rng, f.extent(), 2, 2, 2);
        let cfg = CprLossConfig::default();
        let mut g = CprHeadGrad::zeros_like(&head);
        let mut fg = FeatureGrad::zeros_like(&f);
        loss_cpr(&f, &labels, &regions, &head, &cfg, Some(&mut HeadGradSink { head: &mut g, features: &mut fg })).unwrap();
        let analytic = head_grad_flat(&g);
        let mut params = head_params(&head);
        rep.params[0] = params.len();
        let e = fd_max_rel_error(&mut params, &analytic, h_step, floor, |p| {
            set_head_params(&mut head, p);
            loss_cpr(&f, &labels, &regions, &head, &cfg, None).unwrap().total
        });
        rep.cpr = rep.cpr.max(e);

        // L_var: d = 3, K = 2 → 8 parameters, both reductions.
        let mut var = random_linear(&mut rng, 3, 2, 1.0);
        let targets: Vec<VarTarget> = regions
            .iter()
            .map(|r| VarTarget { category: r.category, center: r.center, sigma: 1.5 })
            .collect();
        let target = variance_supervision(&targets, 6, 6, 2);
        for red in [VarReduction::Sum, VarReduction::Mean] {
            let mut vg = LinearGrad::zeros_like(&var);
            let mut fg = FeatureGrad::zeros_like(&f);
            loss_var(&f, &var, &target, red, Some((&mut vg, &mut fg)));
            let analytic: Vec<f64> = vg.weight.iter().chain(&vg.bias).copied().collect();
            let mut params: Vec<f64> = var.weight.iter().chain(&var.bias).copied().collect();
            rep.params[1] = params.len();
            let e = fd_max_rel_error(&mut params, &analytic, h_step, floor, |p| {
                var.weight.copy_from_slice(&p[..6]);
                var.bias.copy_from_slice(&p[6..]);
                loss_var(&f, &var, &target, red, None)
            });
            rep.var = rep.var.max(e);
        }

        // Localizer: 6 proposals × (2 logits + 2 offsets) = 24 parameters.
        let (mut p, labels) = random_proposals(&mut rng, 2);
        let cfg = LocalizerConfig::default();
        let (_, grad) = localizer_loss(&p, &labels, &cfg, true);
        let grad = grad.unwrap();
        let analytic: Vec<f64> = grad.logits.iter().copied().chain(grad.offsets.iter().flatten().copied()).collect();
        let nl = p.logits.len();
        let mut params: Vec<f64> = p.logits.iter().copied().chain(p.offsets.iter().flatten().copied()).collect();
        rep.params[2] = params.len();
        let e = fd_max_rel_error(&mut params, &analytic, h_step, floor, |q| {
            p.logits.copy_from_slice(&q[..nl]);
            for (i, o) in p.offsets.iter_mut().enumerate() {
                o[0] = q[nl + 2 * i];
                o[1] = q[nl + 2 * i + 1];
            }
            localizer_loss(&p, &labels, &cfg, false).0.total
        });
        rep.localizer = rep.localizer.max(e);
    }
    rep
}

pub fn check_eval_oracle(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut verdicts = 0usize;
    for t in 0..n {
        let ng = rng.random_range(0..=5);
        let np = rng.random_range(0..=10);
        let gts: Vec<EvalGt> = (0..ng)
            .map(|_| EvalGt {
                bbox: cpr_core::dataset::BBox::new(
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    rng.random_range(4.0..30.0),
                    rng.random_range(4.0..30.0),
                ),
                ignore: rng.random_bool(0.2),
            })
            .collect();
        let mut preds: Vec<EvalPred> = (0..np)
            .map(|_| EvalPred {
                point: Point::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let tau = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let got: Vec<(Verdict, Option<usize>)> = match_image(&preds, &gts, tau)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|m| (m.verdict, m.gt))
            .collect();
        let want = ref_match(&preds, &gts, tau);
        if got != want {
            return Err(format!("instance {t}: {got:?} vs oracle {want:?}"));
        }
        verdicts += got.len();
    }
    Ok(format!("{n} instances, {verdicts} verdicts"))
}

pub fn check_nms_oracle(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut kept = 0usize;
    for t in 0..n {
        let m = rng.random_range(0..=30);
        let pts: Vec<LocalizedObject> = (0..m)
            .map(|_| LocalizedObject {
                category: rng.random_range(0..2),
                x: rng.random_range(0.0..64.0),
                y: rng.random_range(0.0..64.0),
                // coarse scores produce ties
                score: (rng.random_range(0..20) as f64) / 20.0,
            })
            .collect();
        let size = rng.random_range(4.0..24.0);
        let thr = rng.random_range(0.1..0.9);
        let got = point_nms(&pts, size, thr);
        let want = ref_nms(&pts, size, thr);
        if got != want {
            return Err(format!("set {t}: {} survivors vs oracle {}", got.len(), want.len()));
        }
        kept += got.len();
    }
    Ok(format!("{n} point sets, {kept} survivors"))
}

// ---------------------------------------------------------------------------
// Degenerate cascade.

pub fn tiny_extractor_config() -> ExtractorConfig {
    ExtractorConfig {
        stride: 8,
        stem_width: 8,
        feature_dim: 8,
        body_dilations: vec![1, 1],
    }
}

/// Five small synthetic images with coarse points.
pub fn five_image_fixture() -> (Dataset, Vec<TrainSample>) {
    let params = SynthParams {
        num_images: 5,
        num_categories: 2,
        width: 64,
        height: 64,
        min_size: 8.0,
        max_size: 40.0,
        max_objects: 3,
        seed: 11,
        ..Default::default()
    };
    let (mut ds, images) = synth_dataset(&params).unwrap();
    generate_coarse_points(&mut ds, 5, 0.25).unwrap();
    let samples = ds
        .images
        .iter()
        .zip(&images)
        .map(|(r, img)| TrainSample {
            image_id: r.image_id,
            image: ImageTensor::from_rgb(img),
            labels: r.coarse_points.iter().map(PointLabel::from_coarse).collect(),
        })
        .collect();
    (ds, samples)
}

pub fn check_degenerate_cascade() -> Check {
    let (ds, samples) = five_image_fixture();
    let cascade = CascadeConfig {
        stages: 1,
        r_init: 3,
        mode: CascadeMode::CascadeII,
        var_loss: false,
        ..Default::default()
    };
    let schedule = TrainSchedule {
        epochs: 2,
        batch_size: 2,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        lr_steps: vec![1],
        flip: true,
        seed: 3,
    };
    let make = || {
        let ex = ConvExtractor::new(tiny_extractor_config(), 21).unwrap();
        new_refiner(ex, &ds.categories, 1, 22, String::new())
    };
    let mut a = make();
    let mut b = make();
    let la = train_refiner(&mut a, &samples, &cascade, &schedule, Objective::Cascade).map_err(|e| e.to_string())?;
    let lb = train_refiner(&mut b, &samples, &cascade, &schedule, Objective::Standalone).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&la) != bits(&lb) {
        return Err(format!("epoch losses differ: {la:?} vs {lb:?}"));
    }
    if a != b {
        return Err("trained weights differ".into());
    }
    let mut points = 0;
    for s in &samples {
        let f = a.extractor.extract(&s.image).unwrap();
        let labels = feature_labels(&s.labels, 8);
        let cas = cprpp_training_loss(&f, &labels, &a.heads, &cascade, None).unwrap();
        let one = cpr_training_loss(&f, &labels, &a.heads.stages[0], 3, &cascade.loss, None).unwrap();
        if cas.total.to_bits() != one.total.to_bits() || cas.var.is_some() {
            return Err(format!("image {}: loss {} vs {}", s.image_id, cas.total, one.total));
        }
        let pp = cprpp_infer_image(&f, &labels, &a.heads, &cascade).unwrap().refined;
        let cp = cpr_refine(&f, &labels, &a.heads.stages[0], 3, &cascade.loss, &cascade.infer).unwrap();
        if bits(&pp.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>())
            != bits(&cp.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>())
        {
            return Err(format!("image {}: refined points differ", s.image_id));
        }
        points += pp.len();
    }
    Ok(format!("5 images, {points} refined points, 2 epochs bit-identical"))
}
