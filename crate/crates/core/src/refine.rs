//! Semantic-point selection, sampling-region estimation and the cascaded
//! refinement procedure, for training and for inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CoarsePoint, Dataset, RefineTrace};
use crate::error::{Error, Result};
use crate::features::{ConvExtractor, FeatureExtractor, FeatureGrad, FeatureMap, ImageTensor};
use crate::geometry::{build_bag_shaped, MapExtent, Point, SamplingRegion};
use crate::nn::{Adam, AdamConfig};
use crate::refiner::{
    loss_cpr, loss_var, variance_supervision, CprHead, CprLossConfig, CprLossTerms, HeadGradSink,
    ObjectLabel, RefinerHeads, RefinerHeadsGrad, RefinerModel, VarReduction, VarTarget,
};

/// Which annotations compete for a candidate point in the nearest-annotation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NearestScope {
    /// Only annotations of the object's own category.
    #[default]
    SameCategory,
    /// Every annotation in the image.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub nearest: NearestScope,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            delta1: 0.1,
            delta2: 0.5,
            nearest: NearestScope::SameCategory,
        }
    }
}

/// Bag points kept for one object, with their scores on its category.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPointSet {
    pub object_id: u64,
    pub points: Vec<Point>,
    pub scores: Vec<f64>,
}

/// Selects the semantic points of every object from its sampling region.
///
/// `regions[j]` belongs to `labels[j]`. The annotated point always leads the set.
pub fn cpr_infer(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    regions: &[SamplingRegion],
    head: &CprHead,
    loss_cfg: &CprLossConfig,
    cfg: &InferConfig,
) -> Result<Vec<SemanticPointSet>> {
    assert_eq!(labels.len(), regions.len());
    let extent = f.extent();
    let mut out = Vec::with_capacity(labels.len());
    for (j, (label, region)) in labels.iter().zip(regions).enumerate() {
        let k = label.category;
        let a = extent.clamp(label.annotated);
        let s_a = head.scores_at(f, a)?;
        let mut set = SemanticPointSet {
            object_id: label.object_id,
            points: vec![a],
            scores: vec![s_a[k]],
        };
        let bag = build_bag_shaped(region, loss_cfg.u0, extent, loss_cfg.shape)?;
        for p in bag.points {
            let s = head.scores_at(f, p)?;
            let sp = s[k];
            if !(sp > cfg.delta1 && sp > cfg.delta2 * s_a[k]) {
                continue;
            }
            if argmax(&s) != k {
                continue;
            }
            if !nearest_is(labels, j, p, cfg.nearest) {
                continue;
            }
            set.points.push(p);
            set.scores.push(sp);
        }
        out.push(set);
    }
    Ok(out)
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

/// Whether annotation `j` is (one of) the closest competing annotations to `p`.
fn nearest_is(labels: &[ObjectLabel], j: usize, p: Point, scope: NearestScope) -> bool {
    let own = p.dist(labels[j].annotated);
    labels.iter().enumerate().all(|(i, other)| {
        i == j
            || (scope == NearestScope::SameCategory && other.category != labels[j].category)
            || p.dist(other.annotated) >= own
    })
}

/// Score-weighted mean of a semantic point set.
pub fn refined_point(set: &SemanticPointSet) -> Point {
    // offsets from the first point keep a singleton set exact
    let origin = set.points[0];
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut total = 0.0;
    for (p, s) in set.points.iter().zip(&set.scores) {
        sx += s * (p.x - origin.x);
        sy += s * (p.y - origin.y);
        total += s;
    }
    if total > 0.0 {
        Point::new(origin.x + sx / total, origin.y + sy / total)
    } else {
        origin
    }
}

/// Next sampling region: the refined point, and the square root of the area
/// of the points' bounding box (floored, at least one) as radius.
pub fn estimate_region(set: &SemanticPointSet, category: usize) -> SamplingRegion {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &set.points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let r = ((x1 - x0) * (y1 - y0)).max(0.0).sqrt();
    SamplingRegion::from_real_radius(set.object_id, category, refined_point(set), r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CascadeMode {
    /// Stages after the first re-estimate both center and radius.
    #[default]
    #[serde(rename = "cascade-ii")]
    CascadeII,
    /// Stages after the first move the center but keep the initial radius.
    #[serde(rename = "cascade-i")]
    CascadeI,
    /// One stage, no cascade.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stages: usize,
    /// Initial sampling radius, feature cells.
    pub r_init: u32,
    pub mode: CascadeMode,
    pub loss: CprLossConfig,
    pub infer: InferConfig,
    pub var_loss: bool,
    /// Fixed decay length of the variance target; `None` uses each object's radius.
    pub var_sigma: Option<f64>,
    pub var_reduction: VarReduction,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 3,
            r_init: 8,
            mode: CascadeMode::CascadeII,
            loss: CprLossConfig::default(),
            infer: InferConfig::default(),
            var_loss: true,
            var_sigma: None,
            var_reduction: VarReduction::Sum,
        }
    }
}

impl CascadeConfig {
    /// Plain single-stage refinement with a fixed radius.
    pub fn cpr(r: u32) -> Self {
        CascadeConfig {
            stages: 1,
            r_init: r,
            mode: CascadeMode::Single,
            var_loss: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("cascade needs at least one stage".into()));
        }
        if self.mode == CascadeMode::Single && self.stages != 1 {
            return Err(Error::Config(format!(
                "mode single requires one stage, got {}",
                self.stages
            )));
        }
        if self.r_init < 1 {
            return Err(Error::Config("r_init must be at least 1".into()));
        }
        if self.loss.u0 < 1 {
            return Err(Error::Config("u0 must be at least 1".into()));
        }
        if let Some(s) = self.var_sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("var_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Whether the last stage carries the variance loss.
    pub fn uses_var(&self) -> bool {
        self.var_loss && self.stages > 1
    }
}

/// Regions of one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    /// One-based stage index.
    pub stage: usize,
    pub regions: Vec<SamplingRegion>,
    /// Semantic points selected by this stage.
    pub semantic: Vec<SemanticPointSet>,
}

/// Initial regions: centered on the annotations with radius `r_init`.
pub fn initial_regions(labels: &[ObjectLabel], extent: MapExtent, r_init: u32) -> Vec<SamplingRegion> {
    labels
        .iter()
        .map(|l| SamplingRegion::new(l.object_id, l.category, extent.clamp(l.annotated), r_init))
        .collect()
}

fn next_regions(
    states: &[SemanticPointSet],
    labels: &[ObjectLabel],
    extent: MapExtent,
    cfg: &CascadeConfig,
) -> Vec<SamplingRegion> {
    states
        .iter()
        .zip(labels)
        .map(|(set, l)| {
            let mut r = estimate_region(set, l.category);
            r.center = extent.clamp(r.center);
            if cfg.mode == CascadeMode::CascadeI {
                r.radius = cfg.r_init;
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLoss {
    pub stages: Vec<CprLossTerms>,
    pub var: Option<f64>,
    pub total: f64,
    pub states: Vec<StageState>,
}

/// Gradient buffers for the whole refiner head set.
pub struct RefinerGradSink<'a> {
    pub heads: &'a mut RefinerHeadsGrad,
    pub features: &'a mut FeatureGrad,
}

fn var_targets(regions: &[SamplingRegion], sigma: Option<f64>) -> Vec<VarTarget> {
    regions
        .iter()
        .map(|r| VarTarget {
            category: r.category,
            center: r.center,
            sigma: sigma.unwrap_or(r.radius as f64),
        })
        .collect()
}

/// Sum of the per-stage losses, plus the variance loss on the last stage of
/// a multi-stage cascade. Region geometry carries no gradient.
pub fn cprpp_training_loss(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    heads: &RefinerHeads,
    cfg: &CascadeConfig,
    mut sink: Option<&mut RefinerGradSink<'_>>,
) -> Result<CascadeLoss> {
    cfg.validate()?;
    if heads.stages.len() < cfg.stages {
        return Err(Error::Config(format!(
            "{} stages configured but the model has {} heads",
            cfg.stages,
            heads.stages.len()
        )));
    }
    let extent = f.extent();
    let mut regions = initial_regions(labels, extent, cfg.r_init);
    let mut out = CascadeLoss {
        stages: Vec::with_capacity(cfg.stages),
        var: None,
        total: 0.0,
        states: Vec::with_capacity(cfg.stages),
    };
    for k in 0..cfg.stages {
        let head = &heads.stages[k];
        let terms = {
            let mut stage_sink = sink.as_deref_mut().map(|s| HeadGradSink {
                head: &mut s.heads.stages[k],
                features: &mut *s.features,
            });
            loss_cpr(f, labels, &regions, head, &cfg.loss, stage_sink.as_mut())?
        };
        out.total += terms.total;
        out.stages.push(terms);
        if k + 1 == cfg.stages && cfg.uses_var() {
            let g = variance_supervision(
                &var_targets(&regions, cfg.var_sigma),
                f.height,
                f.width,
                heads.num_categories(),
            );
            let v = loss_var(
                f,
                &heads.var,
                &g,
                cfg.var_reduction,
                sink.as_deref_mut().map(|s| (&mut s.heads.var, &mut *s.features)),
            );
            out.total += v;
            out.var = Some(v);
        }
        let semantic = cpr_infer(f, labels, &regions, head, &cfg.loss, &cfg.infer)?;
        let next = next_regions(&semantic, labels, extent, cfg);
        out.states.push(StageState {
            stage: k + 1,
            regions: std::mem::replace(&mut regions, next),
            semantic,
        });
    }
    Ok(out)
}

/// Loss of one refinement stage at a fixed radius, without the cascade machinery.
pub fn cpr_training_loss(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    head: &CprHead,
    r: u32,
    loss_cfg: &CprLossConfig,
    sink: Option<&mut HeadGradSink<'_>>,
) -> Result<CprLossTerms> {
    let regions = initial_regions(labels, f.extent(), r);
    loss_cpr(f, labels, &regions, head, loss_cfg, sink)
}

/// Refined points of one stage at a fixed radius, feature coordinates.
pub fn cpr_refine(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    head: &CprHead,
    r: u32,
    loss_cfg: &CprLossConfig,
    cfg: &InferConfig,
) -> Result<Vec<Point>> {
    let regions = initial_regions(labels, f.extent(), r);
    Ok(cpr_infer(f, labels, &regions, head, loss_cfg, cfg)?
        .iter()
        .map(refined_point)
        .collect())
}

/// Outcome of cascaded inference on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeInference {
    /// Final centers, feature coordinates.
    pub refined: Vec<Point>,
    pub states: Vec<StageState>,
}

/// Runs selection and region estimation `K` times from the annotations.
pub fn cprpp_infer_image(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    heads: &RefinerHeads,
    cfg: &CascadeConfig,
) -> Result<CascadeInference> {
    cfg.validate()?;
    let extent = f.extent();
    let mut regions = initial_regions(labels, extent, cfg.r_init);
    let mut states = Vec::with_capacity(cfg.stages);
    let mut refined = Vec::new();
    for k in 0..cfg.stages {
        let semantic = cpr_infer(f, labels, &regions, &heads.stages[k], &cfg.loss, &cfg.infer)?;
        refined = semantic.iter().map(refined_point).collect();
        let next = next_regions(&semantic, labels, extent, cfg);
        states.push(StageState {
            stage: k + 1,
            regions: std::mem::replace(&mut regions, next),
            semantic,
        });
    }
    Ok(CascadeInference { refined, states })
}

/// Point supervision in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLabel {
    pub object_id: u64,
    pub category: usize,
    pub position: Point,
}

impl PointLabel {
    pub fn from_coarse(cp: &CoarsePoint) -> Self {
        PointLabel {
            object_id: cp.object_id,
            category: cp.category,
            position: cp.position,
        }
    }

    pub fn to_feature(&self, stride: u32) -> ObjectLabel {
        ObjectLabel {
            object_id: self.object_id,
            category: self.category,
            annotated: self.position.scale(1.0 / stride as f64),
        }
    }

    fn flipped(&self, width: usize) -> Self {
        PointLabel {
            position: Point::new(width as f64 - self.position.x, self.position.y),
            ..*self
        }
    }
}

/// One training image with its point labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: u64,
    pub image: ImageTensor,
    pub labels: Vec<PointLabel>,
}

pub fn feature_labels(labels: &[PointLabel], stride: u32) -> Vec<ObjectLabel> {
    labels.iter().map(|l| l.to_feature(stride)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs (zero-based) at whose start the learning rate is divided by ten.
    pub lr_steps: Vec<usize>,
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 12,
            batch_size: 4,
            adam: AdamConfig {
                lr: 2e-3,
                ..Default::default()
            },
            lr_steps: vec![8, 11],
            flip: true,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|s| epoch >= **s).count();
        self.adam.lr * 0.1f64.powi(drops as i32)
    }
}

/// Which loss drives refiner training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The cascade objective with all its stages.
    Cascade,
    /// The first head alone at the initial radius, bypassing the cascade code.
    Standalone,
}

/// Mean loss of every epoch.
pub type LossHistory = Vec<f64>;

fn order_for_epoch(n: usize, seed: u64, epoch: usize) -> (Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let flips = (0..n).map(|_| rng.random_bool(0.5)).collect();
    (order, flips)
}

fn apply_heads(adam: &mut Adam, heads: &mut RefinerHeads, g: &RefinerHeadsGrad, scale: f64) {
    for (h, hg) in heads.stages.iter_mut().zip(&g.stages) {
        adam.update_f64(&mut h.cls.weight, &hg.cls.weight, scale);
        adam.update_f64(&mut h.cls.bias, &hg.cls.bias, scale);
        adam.update_f64(&mut h.ins.weight, &hg.ins.weight, scale);
        adam.update_f64(&mut h.ins.bias, &hg.ins.bias, scale);
    }
    adam.update_f64(&mut heads.var.weight, &g.var.weight, scale);
    adam.update_f64(&mut heads.var.bias, &g.var.bias, scale);
}

/// Trains extractor and heads in place.
pub fn train_refiner(
    model: &mut RefinerModel,
    samples: &[TrainSample],
    cascade: &CascadeConfig,
    schedule: &TrainSchedule,
    objective: Objective,
) -> Result<LossHistory> {
    cascade.validate()?;
    schedule.validate()?;
    let stride = model.extractor.stride();
    let mut adam = Adam::new(schedule.adam);
    let mut ext_grad = model.extractor.zero_grad();
    let mut head_grad = RefinerHeadsGrad::zeros_like(&model.heads);
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        adam.set_lr(schedule.lr_at(epoch));
        let (order, flips) = order_for_epoch(samples.len(), schedule.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            ext_grad.clear();
            head_grad.clear();
            for &i in batch {
                let sample = &samples[i];
                let flip = schedule.flip && flips[i];
                let (image, labels) = if flip {
                    let w = sample.image.width();
                    (
                        sample.image.flipped(),
                        sample.labels.iter().map(|l| l.flipped(w)).collect::<Vec<_>>(),
                    )
                } else {
                    (sample.image.clone(), sample.labels.clone())
                };
                let (f, trace) = model.extractor.forward_train(&image)?;
                let labels = feature_labels(&labels, stride);
                let mut fg = FeatureGrad::zeros_like(&f);
                let loss = match objective {
                    Objective::Cascade => {
                        let mut sink = RefinerGradSink {
                            heads: &mut head_grad,
                            features: &mut fg,
                        };
                        cprpp_training_loss(&f, &labels, &model.heads, cascade, Some(&mut sink))?.total
                    }
                    Objective::Standalone => {
                        let mut sink = HeadGradSink {
                            head: &mut head_grad.stages[0],
                            features: &mut fg,
                        };
                        cpr_training_loss(
                            &f,
                            &labels,
                            &model.heads.stages[0],
                            cascade.r_init,
                            &cascade.loss,
                            Some(&mut sink),
                        )?
                        .total
                    }
                };
                epoch_loss += loss;
                model.extractor.backward(&trace, &fg, &mut ext_grad);
            }
            let scale = 1.0 / batch.len() as f64;
            adam.begin_step();
            model.extractor.apply(&mut adam, &ext_grad, scale);
            apply_heads(&mut adam, &mut model.heads, &head_grad, scale);
        }
        let mean = epoch_loss / samples.len().max(1) as f64;
        log::info!("refiner epoch {}/{}: loss {mean:.4}", epoch + 1, schedule.epochs);
        history.push(mean);
    }
    Ok(history)
}

/// Fresh model for a dataset's category table.
pub fn new_refiner(
    extractor: ConvExtractor,
    categories: &[crate::dataset::Category],
    stages: usize,
    seed: u64,
    config_hash: String,
) -> RefinerModel {
    let heads = RefinerHeads::new(extractor.dim(), categories.len(), stages, seed);
    RefinerModel {
        extractor,
        heads,
        categories: categories.to_vec(),
        config_hash,
    }
}

/// Refined point of every labeled object in image pixels, with its trace.
pub fn refine_sample(
    model: &RefinerModel,
    sample: &TrainSample,
    cascade: &CascadeConfig,
) -> Result<Vec<CoarsePoint>> {
    let stride = model.extractor.stride();
    let f = model.extractor.extract(&sample.image)?;
    let labels = feature_labels(&sample.labels, stride);
    let inf = cprpp_infer_image(&f, &labels, &model.heads, cascade)?;
    Ok(sample
        .labels
        .iter()
        .zip(&inf.refined)
        .enumerate()
        .map(|(j, (l, p))| CoarsePoint {
            object_id: l.object_id,
            category: l.category,
            position: p.scale(stride as f64),
            trace: Some(RefineTrace {
                stages: cascade.stages,
                radii: inf.states.iter().map(|s| s.regions[j].radius).collect(),
                source: [l.position.x, l.position.y],
            }),
        })
        .collect())
}

/// Replaces every image's coarse points by their refined positions.
///
/// `samples` must follow the image order of `dataset`.
pub fn cprpp_infer(
    model: &RefinerModel,
    dataset: &Dataset,
    samples: &[TrainSample],
    cascade: &CascadeConfig,
) -> Result<Dataset> {
    let mut out = dataset.clone();
    for (img, sample) in out.images.iter_mut().zip(samples) {
        if img.image_id != sample.image_id {
            return Err(Error::Input(format!(
                "sample order mismatch: image {} vs sample {}",
                img.image_id, sample.image_id
            )));
        }
        img.coarse_points = refine_sample(model, sample, cascade)?;
    }
    Ok(out)
}

/// Mean displacement in pixels between two point sets of the same objects.
pub fn mean_displacement(before: &Dataset, after: &Dataset) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, b) in before.images.iter().zip(&after.images) {
        for (p, q) in a.coarse_points.iter().zip(&b.coarse_points) {
            total += p.position.dist(q.position);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Per-iteration statistics of an iterative refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub mean_displacement: f64,
    pub losses: LossHistory,
}

/// Trains a fresh single-stage refiner, refines, and repeats on the refined points.
///
/// `make_model` builds the untrained model of each iteration.
pub fn iterative_cpr(
    dataset: &Dataset,
    samples: &[TrainSample],
    r: u32,
    loss_cfg: &CprLossConfig,
    infer: &InferConfig,
    schedule: &TrainSchedule,
    iterations: usize,
    mut make_model: impl FnMut(usize) -> Result<RefinerModel>,
) -> Result<(Dataset, Vec<IterationReport>)> {
    let mut cascade = CascadeConfig::cpr(r);
    cascade.loss = *loss_cfg;
    cascade.infer = *infer;
    let mut current = dataset.clone();
    let mut samples = samples.to_vec();
    let mut reports = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut model = make_model(it)?;
        let losses = train_refiner(&mut model, &samples, &cascade, schedule, Objective::Standalone)?;
        let next = cprpp_infer(&model, &current, &samples, &cascade)?;
        let d = mean_displacement(&current, &next);
        log::info!("iterative refinement {}: mean displacement {d:.3} px", it + 1);
        for (s, img) in samples.iter_mut().zip(&next.images) {
            s.labels = img.coarse_points.iter().map(PointLabel::from_coarse).collect();
        }
        reports.push(IterationReport {
            iteration: it + 1,
            mean_displacement: d,
            losses,
        });
        current = next;
    }
    Ok((current, reports))
}
