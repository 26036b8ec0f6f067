//! Dense point localizer: one proposal per feature cell with a classification
//! head and an offset head, top-k target assignment, focal + smooth-L1 loss,
//! and point NMS over fixed-size pseudo boxes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Category;
use crate::error::{Error, Result};
use crate::features::{ConvExtractor, FeatureExtractor, FeatureGrad, FeatureMap, ImageTensor};
use crate::geometry::Point;
use crate::nn::Adam;
use crate::refine::{PointLabel, TrainSample, TrainSchedule};
use crate::refiner::{
    focal_term, focal_term_grad, load_json, save_json, sigmoid, Linear, LinearGrad,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Positives per ground-truth point.
    pub k: usize,
    pub lambda_reg: f64,
    pub gamma: f64,
    /// Side of the square pseudo box used by NMS, pixels.
    pub nms_box: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            k: 4,
            lambda_reg: 1.0,
            gamma: 2.0,
            nms_box: 16.0,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("localizer k must be at least 1".into()));
        }
        if !(self.nms_box > 0.0) {
            return Err(Error::Config("nms_box must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Dense predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub height: usize,
    pub width: usize,
    pub stride: u32,
    pub num_categories: usize,
    /// Row-major anchors, image pixels.
    pub anchors: Vec<Point>,
    /// `N × K` classification logits.
    pub logits: Vec<f64>,
    /// `N` predicted offsets, pixels.
    pub offsets: Vec<[f64; 2]>,
}

/// One dense proposal in readable form.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProposal {
    pub anchor: Point,
    pub offset: [f64; 2],
    pub scores: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn proposal(&self, i: usize) -> PointProposal {
        let k = self.num_categories;
        PointProposal {
            anchor: self.anchors[i],
            offset: self.offsets[i],
            scores: self.logits[i * k..(i + 1) * k].iter().map(|z| sigmoid(*z)).collect(),
        }
    }
}

/// Anchor of every cell of an `h × w` map.
pub fn anchors(height: usize, width: usize, stride: u32) -> Vec<Point> {
    let s = stride as f64;
    (0..height)
        .flat_map(|y| (0..width).map(move |x| Point::new(x as f64 * s, y as f64 * s)))
        .collect()
}

/// Ground-truth point for assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPoint {
    pub object_id: u64,
    pub category: usize,
    pub position: Point,
}

/// Positive label of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub gt: usize,
    pub category: usize,
    /// `gt − anchor`, pixels.
    pub target: [f64; 2],
}

/// Top-k nearest anchors per ground truth; an anchor wanted by several goes to
/// the nearest, ties to the lower object id. Anchor ties break by index.
pub fn assign_targets(anchors: &[Point], gts: &[GtPoint], k: usize) -> Vec<Option<Assignment>> {
    assert!(k >= 1, "k must be positive");
    if anchors.len() < k && !gts.is_empty() {
        log::warn!(
            "only {} anchors for top-{k} assignment; assigning all",
            anchors.len()
        );
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (a.dist(gt.position), i))
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d, i) in order.iter().take(k) {
            let take = match best[i] {
                None => true,
                Some((og, od)) => d < od || (d == od && gt.object_id < gts[og].object_id),
            };
            if take {
                best[i] = Some((g, d));
            }
        }
    }
    best.iter()
        .enumerate()
        .map(|(i, b)| {
            b.map(|(g, _)| Assignment {
                gt: g,
                category: gts[g].category,
                target: [
                    gts[g].position.x - anchors[i].x,
                    gts[g].position.y - anchors[i].y,
                ],
            })
        })
        .collect()
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalizerLoss {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub num_pos: usize,
}

/// Gradients of [`localizer_loss`] with respect to logits and offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerLossGrad {
    pub logits: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

/// Focal classification over all proposals plus smooth-L1 (β = 1) on the
/// positives' offsets, both normalized by the number of positives.
pub fn localizer_loss(
    p: &ProposalSet,
    labels: &[Option<Assignment>],
    cfg: &LocalizerConfig,
    want_grad: bool,
) -> (LocalizerLoss, Option<LocalizerLossGrad>) {
    let k = p.num_categories;
    let num_pos = labels.iter().filter(|l| l.is_some()).count();
    let norm = num_pos.max(1) as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut grad = want_grad.then(|| LocalizerLossGrad {
        logits: vec![0.0; p.logits.len()],
        offsets: vec![[0.0; 2]; p.len()],
    });
    for i in 0..p.len() {
        let label = labels[i];
        for c in 0..k {
            let s = sigmoid(p.logits[i * k + c]);
            let pos = label.is_some_and(|l| l.category == c);
            cls += focal_term(s, pos, cfg.gamma);
            if let Some(g) = grad.as_mut() {
                g.logits[i * k + c] = focal_term_grad(s, pos, cfg.gamma) * s * (1.0 - s) / norm;
            }
        }
        if let Some(l) = label {
            for d in 0..2 {
                let e = p.offsets[i][d] - l.target[d];
                reg += smooth_l1(e, 1.0);
                if let Some(g) = grad.as_mut() {
                    g.offsets[i][d] = cfg.lambda_reg * smooth_l1_grad(e, 1.0) / norm;
                }
            }
        }
    }
    let cls = cls / norm;
    let reg = reg / norm;
    (
        LocalizerLoss {
            cls,
            reg,
            total: cls + cfg.lambda_reg * reg,
            num_pos,
        },
        grad,
    )
}

/// A scored point before or after suppression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizedObject {
    pub category: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// IoU of two equal squares of side `size` centered on the points.
pub fn pseudo_box_iou(a: Point, b: Point, size: f64) -> f64 {
    let ox = (size - (a.x - b.x).abs()).max(0.0);
    let oy = (size - (a.y - b.y).abs()).max(0.0);
    let inter = ox * oy;
    inter / (2.0 * size * size - inter)
}

/// Greedy per-category suppression with square pseudo boxes.
/// Output is sorted by descending score; ties keep input order.
pub fn point_nms(points: &[LocalizedObject], box_size: f64, iou_threshold: f64) -> Vec<LocalizedObject> {
    assert!(box_size > 0.0, "pseudo box size must be positive");
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].score.partial_cmp(&points[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<LocalizedObject> = Vec::new();
    for i in order {
        let p = points[i];
        let pp = Point::new(p.x, p.y);
        let suppressed = kept.iter().any(|q| {
            q.category == p.category && pseudo_box_iou(pp, Point::new(q.x, q.y), box_size) > iou_threshold
        });
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerModel {
    pub extractor: ConvExtractor,
    pub cls: Linear,
    pub reg: Linear,
    pub categories: Vec<Category>,
    pub config_hash: String,
}

pub struct LocalizerGrad {
    pub cls: LinearGrad,
    pub reg: LinearGrad,
}

impl LocalizerModel {
    pub fn new(extractor: ConvExtractor, categories: &[Category], seed: u64, config_hash: String) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = extractor.dim();
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        let mut reg = Linear::xavier(d, 2, 0.0, &mut rng);
        reg.weight.iter_mut().for_each(|w| *w *= 0.1);
        LocalizerModel {
            extractor,
            cls: Linear::xavier(d, categories.len(), prior, &mut rng),
            reg,
            categories: categories.to_vec(),
            config_hash,
        }
    }

    pub fn stride(&self) -> u32 {
        self.extractor.stride()
    }

    /// Dense proposals from a feature map.
    pub fn proposals(&self, f: &FeatureMap) -> ProposalSet {
        let k = self.cls.out_dim;
        let s = f.stride as f64;
        let mut logits = Vec::with_capacity(f.height * f.width * k);
        let mut offsets = Vec::with_capacity(f.height * f.width);
        for y in 0..f.height {
            for x in 0..f.width {
                let cell = f.cell(x, y);
                logits.extend(self.cls.forward_f32(cell));
                let o = self.reg.forward_f32(cell);
                offsets.push([o[0] * s, o[1] * s]);
            }
        }
        ProposalSet {
            height: f.height,
            width: f.width,
            stride: f.stride,
            num_categories: k,
            anchors: anchors(f.height, f.width, f.stride),
            logits,
            offsets,
        }
    }

    fn backward(&self, f: &FeatureMap, g: &LocalizerLossGrad, grad: &mut LocalizerGrad) -> FeatureGrad {
        let k = self.cls.out_dim;
        let s = f.stride as f64;
        let mut fg = FeatureGrad::zeros_like(f);
        for y in 0..f.height {
            for x in 0..f.width {
                let i = y * f.width + x;
                let xv: Vec<f64> = f.cell(x, y).iter().map(|v| *v as f64).collect();
                let mut dx = self.cls.backward(&xv, &g.logits[i * k..(i + 1) * k], &mut grad.cls);
                let d_off = [g.offsets[i][0] * s, g.offsets[i][1] * s];
                if d_off != [0.0, 0.0] {
                    let dx2 = self.reg.backward(&xv, &d_off, &mut grad.reg);
                    dx.iter_mut().zip(dx2).for_each(|(a, b)| *a += b);
                }
                fg.cell_mut(x, y).iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
        fg
    }

    /// Thresholded, suppressed detections of one image.
    pub fn predict(&self, image: &ImageTensor, cfg: &LocalizerConfig) -> Result<Vec<LocalizedObject>> {
        let f = self.extractor.extract(image)?;
        let p = self.proposals(&f);
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut cands = Vec::new();
        for i in 0..p.len() {
            let a = p.anchors[i];
            let x = (a.x + p.offsets[i][0]).clamp(0.0, w);
            let y = (a.y + p.offsets[i][1]).clamp(0.0, h);
            for c in 0..p.num_categories {
                let score = sigmoid(p.logits[i * p.num_categories + c]);
                if score > cfg.score_threshold {
                    cands.push(LocalizedObject { category: c, x, y, score });
                }
            }
        }
        let mut kept = point_nms(&cands, cfg.nms_box, cfg.nms_iou);
        kept.truncate(cfg.max_detections);
        Ok(kept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

/// Trains a localizer in place on point labels (image pixels).
pub fn train_localizer(
    model: &mut LocalizerModel,
    samples: &[TrainSample],
    cfg: &LocalizerConfig,
    schedule: &TrainSchedule,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    schedule.validate()?;
    let mut adam = Adam::new(schedule.adam);
    let mut ext_grad = model.extractor.zero_grad();
    let mut grad = LocalizerGrad {
        cls: LinearGrad::zeros_like(&model.cls),
        reg: LinearGrad::zeros_like(&model.reg),
    };
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        adam.set_lr(schedule.lr_at(epoch));
        let mut rng = ChaCha8Rng::seed_from_u64(
            schedule.seed ^ 0x5151 ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..samples.len()).map(|_| rng.random_bool(0.5)).collect();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            ext_grad.clear();
            grad.cls.clear();
            grad.reg.clear();
            for &i in batch {
                let s = &samples[i];
                let flip = schedule.flip && flips[i];
                let (image, labels): (ImageTensor, Vec<PointLabel>) = if flip {
                    let w = s.image.width() as f64;
                    (
                        s.image.flipped(),
                        s.labels
                            .iter()
                            .map(|l| PointLabel {
                                position: Point::new(w - l.position.x, l.position.y),
                                ..*l
                            })
                            .collect(),
                    )
                } else {
                    (s.image.clone(), s.labels.clone())
                };
                let (f, trace) = model.extractor.forward_train(&image)?;
                let p = model.proposals(&f);
                let gts: Vec<GtPoint> = labels
                    .iter()
                    .map(|l| GtPoint {
                        object_id: l.object_id,
                        category: l.category,
                        position: l.position,
                    })
                    .collect();
                let assigned = assign_targets(&p.anchors, &gts, cfg.k);
                let (loss, g) = localizer_loss(&p, &assigned, cfg, true);
                epoch_loss += loss.total;
                let fg = model.backward(&f, &g.expect("gradient requested"), &mut grad);
                model.extractor.backward(&trace, &fg, &mut ext_grad);
            }
            let scale = 1.0 / batch.len() as f64;
            adam.begin_step();
            model.extractor.apply(&mut adam, &ext_grad, scale);
            adam.update_f64(&mut model.cls.weight, &grad.cls.weight, scale);
            adam.update_f64(&mut model.cls.bias, &grad.cls.bias, scale);
            adam.update_f64(&mut model.reg.weight, &grad.reg.weight, scale);
            adam.update_f64(&mut model.reg.bias, &grad.reg.bias, scale);
        }
        let mean = epoch_loss / samples.len().max(1) as f64;
        log::info!("localizer epoch {}/{}: loss {mean:.4}", epoch + 1, schedule.epochs);
        history.push(mean);
    }
    Ok(history)
}

/// Predictions of one image, as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: u64,
    pub predictions: Vec<LocalizedObject>,
}

pub fn save_predictions(preds: &[ImagePredictions], path: &Path) -> Result<()> {
    save_json(&preds, path)
}

pub fn load_predictions(path: &Path) -> Result<Vec<ImagePredictions>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
