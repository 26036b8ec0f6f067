//! CPR heads and training objectives.
//!
//! Every loss here evaluates in `f64` and can optionally accumulate analytic
//! gradients into a [`HeadGradSink`]: gradients for the head parameters and
//! for the feature map (which the extractor then backpropagates).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Category;
use crate::error::{Error, Result};
use crate::features::{Bilinear, ConvExtractor, FeatureGrad, FeatureMap};
use crate::geometry::{
    build_bag_shaped, build_negatives_shaped, MapExtent, NegativeSet, Point, PointBag,
    SamplingRegion, SamplingShape,
};

/// Lower/upper clamp applied to scores before taking logs.
pub const SCORE_EPS: f64 = 1e-6;

/// Bias giving an initial sigmoid score of 0.01.
fn prior_bias() -> f64 {
    -((1.0 - 0.01f64) / 0.01).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Fully connected map `in_dim → out_dim`; also serves as a 1×1 convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(l: &Linear) -> Self {
        LinearGrad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|g| *g = 0.0);
        self.bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

impl Linear {
    /// Xavier-uniform weights and a constant bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: f64, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![bias; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Same as `forward` for an `f32` input row.
    pub fn forward_f32(&self, x: &[f32]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients for `dy` at input `x`; returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearGrad) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Classification and instance-selection branches of one CPR stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CprHead {
    pub cls: Linear,
    pub ins: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CprHeadGrad {
    pub cls: LinearGrad,
    pub ins: LinearGrad,
}

impl CprHeadGrad {
    pub fn zeros_like(h: &CprHead) -> Self {
        CprHeadGrad {
            cls: LinearGrad::zeros_like(&h.cls),
            ins: LinearGrad::zeros_like(&h.ins),
        }
    }

    pub fn clear(&mut self) {
        self.cls.clear();
        self.ins.clear();
    }
}

impl CprHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_categories: usize, rng: &mut R) -> Self {
        CprHead {
            cls: Linear::xavier(dim, num_categories, prior_bias(), rng),
            ins: Linear::xavier(dim, num_categories, 0.0, rng),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.cls.out_dim
    }

    /// Sigmoid classification scores at a fractional point.
    pub fn scores_at(&self, f: &FeatureMap, p: Point) -> Result<Vec<f64>> {
        let x = f.feature_at(p)?;
        Ok(self.cls.forward(&x).into_iter().map(sigmoid).collect())
    }
}

/// Per-stage CPR heads plus the variance branch, over one shared extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerHeads {
    pub stages: Vec<CprHead>,
    /// 1×1 convolution `dim → K`.
    pub var: Linear,
}

impl RefinerHeads {
    pub fn new(dim: usize, num_categories: usize, stages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RefinerHeads {
            stages: (0..stages.max(1))
                .map(|_| CprHead::new(dim, num_categories, &mut rng))
                .collect(),
            var: Linear::xavier(dim, num_categories, prior_bias(), &mut rng),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.var.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerHeadsGrad {
    pub stages: Vec<CprHeadGrad>,
    pub var: LinearGrad,
}

impl RefinerHeadsGrad {
    pub fn zeros_like(h: &RefinerHeads) -> Self {
        RefinerHeadsGrad {
            stages: h.stages.iter().map(CprHeadGrad::zeros_like).collect(),
            var: LinearGrad::zeros_like(&h.var),
        }
    }

    pub fn clear(&mut self) {
        self.stages.iter_mut().for_each(CprHeadGrad::clear);
        self.var.clear();
    }
}

/// Where gradients of a CPR loss go.
pub struct HeadGradSink<'a> {
    pub head: &'a mut CprHeadGrad,
    pub features: &'a mut FeatureGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_ann: f64,
    pub alpha_neg: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_ann: 0.5,
            alpha_neg: 3.0,
            gamma: 2.0,
        }
    }
}

/// Normalizer of the negative loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegNormalization {
    /// Divide by the number of objects in the image.
    #[default]
    Objects,
    /// Divide by the number of negative (point, category) pairs.
    Points,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CprLossConfig {
    pub weights: LossWeights,
    pub u0: u32,
    pub shape: SamplingShape,
    pub neg_normalization: NegNormalization,
}

impl Default for CprLossConfig {
    fn default() -> Self {
        CprLossConfig {
            weights: LossWeights::default(),
            u0: 8,
            shape: SamplingShape::Circle,
            neg_normalization: NegNormalization::Objects,
        }
    }
}

/// Focal loss of one score against a binary label, with the usual
/// non-negative sign convention.
pub fn focal_term(s: f64, positive: bool, gamma: f64) -> f64 {
    let s = clamp_score(s);
    if positive {
        -(1.0 - s).powf(gamma) * s.ln()
    } else {
        -s.powf(gamma) * (1.0 - s).ln()
    }
}

/// Derivative of [`focal_term`] with respect to the score (clamp treated as identity).
pub fn focal_term_grad(s: f64, positive: bool, gamma: f64) -> f64 {
    let s = clamp_score(s);
    if positive {
        gamma * (1.0 - s).powf(gamma - 1.0) * s.ln() - (1.0 - s).powf(gamma) / s
    } else {
        -gamma * s.powf(gamma - 1.0) * (1.0 - s).ln() + s.powf(gamma) / (1.0 - s)
    }
}

/// Multi-label focal loss of a score vector against a one-hot category.
pub fn focal_loss(scores: &[f64], category: usize, gamma: f64) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(k, s)| focal_term(*s, k == category, gamma))
        .sum()
}

fn focal_loss_grad(scores: &[f64], category: usize, gamma: f64) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(k, s)| focal_term_grad(*s, k == category, gamma))
        .collect()
}

/// Scores of one bag, `|bag| × K` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BagScores {
    pub num_categories: usize,
    pub cls: Vec<f64>,
    pub ins: Vec<f64>,
    pub over: Vec<f64>,
    pub bag: Vec<f64>,
}

impl BagScores {
    pub fn len(&self) -> usize {
        self.cls.len() / self.num_categories
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    pub fn cls_at(&self, p: usize) -> &[f64] {
        &self.cls[p * self.num_categories..(p + 1) * self.num_categories]
    }

    pub fn ins_at(&self, p: usize) -> &[f64] {
        &self.ins[p * self.num_categories..(p + 1) * self.num_categories]
    }
}

struct BagEval {
    samples: Vec<(Bilinear, Vec<f64>)>,
    scores: BagScores,
}

fn eval_bag(f: &FeatureMap, bag: &PointBag, head: &CprHead) -> Result<BagEval> {
    if bag.points.is_empty() {
        return Err(Error::EmptyBag {
            object_id: bag.object_id,
        });
    }
    let k = head.num_categories();
    let u = bag.points.len();
    let mut samples = Vec::with_capacity(u);
    let mut cls = Vec::with_capacity(u * k);
    let mut ins_logits = Vec::with_capacity(u * k);
    for p in &bag.points {
        let b = f.bilinear(*p)?;
        let x = f.gather(&b);
        cls.extend(head.cls.forward(&x).into_iter().map(sigmoid));
        ins_logits.extend(head.ins.forward(&x));
        samples.push((b, x));
    }
    // softmax over bag points, per category
    let mut ins = vec![0.0; u * k];
    for c in 0..k {
        let max = (0..u).map(|p| ins_logits[p * k + c]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..u).map(|p| (ins_logits[p * k + c] - max).exp()).sum();
        for p in 0..u {
            ins[p * k + c] = (ins_logits[p * k + c] - max).exp() / total;
        }
    }
    let over: Vec<f64> = cls.iter().zip(&ins).map(|(a, b)| a * b).collect();
    let mut bag_scores = vec![0.0; k];
    for p in 0..u {
        for c in 0..k {
            bag_scores[c] += over[p * k + c];
        }
    }
    Ok(BagEval {
        samples,
        scores: BagScores {
            num_categories: k,
            cls,
            ins,
            over,
            bag: bag_scores,
        },
    })
}

/// Classification, selection and bag scores of one point bag.
pub fn bag_forward(f: &FeatureMap, bag: &PointBag, head: &CprHead) -> Result<BagScores> {
    Ok(eval_bag(f, bag, head)?.scores)
}

/// Backpropagates `d_bag` (gradient wrt the bag score vector).
fn backward_bag(eval: &BagEval, d_bag: &[f64], head: &CprHead, sink: &mut HeadGradSink<'_>) {
    let s = &eval.scores;
    let k = s.num_categories;
    for (p, (b, x)) in eval.samples.iter().enumerate() {
        let mut d_cls = vec![0.0; k];
        let mut d_ins = vec![0.0; k];
        for c in 0..k {
            let sc = s.cls[p * k + c];
            let si = s.ins[p * k + c];
            d_cls[c] = d_bag[c] * si * sc * (1.0 - sc);
            d_ins[c] = d_bag[c] * si * (sc - s.bag[c]);
        }
        let mut dx = head.cls.backward(x, &d_cls, &mut sink.head.cls);
        let dx2 = head.ins.backward(x, &d_ins, &mut sink.head.ins);
        dx.iter_mut().zip(dx2).for_each(|(a, b)| *a += b);
        sink.features.scatter(b, &dx);
    }
}

/// Supervision for one object in feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectLabel {
    pub object_id: u64,
    pub category: usize,
    /// Annotated point, feature coordinates.
    pub annotated: Point,
}

/// Mean focal loss between bag scores and the object labels.
pub fn loss_mil(
    f: &FeatureMap,
    bags: &[PointBag],
    head: &CprHead,
    gamma: f64,
    mut sink: Option<&mut HeadGradSink<'_>>,
) -> Result<f64> {
    if bags.is_empty() {
        return Ok(0.0);
    }
    let m = bags.len() as f64;
    let mut total = 0.0;
    for bag in bags {
        let eval = eval_bag(f, bag, head)?;
        total += focal_loss(&eval.scores.bag, bag.category, gamma);
        if let Some(sink) = sink.as_deref_mut() {
            let d: Vec<f64> = focal_loss_grad(&eval.scores.bag, bag.category, gamma)
                .into_iter()
                .map(|g| g / m)
                .collect();
            backward_bag(&eval, &d, head, sink);
        }
    }
    Ok(total / m)
}

/// Mean focal loss of the classification score at each annotated point.
pub fn loss_ann(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    head: &CprHead,
    gamma: f64,
    mut sink: Option<&mut HeadGradSink<'_>>,
) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let m = labels.len() as f64;
    let mut total = 0.0;
    for l in labels {
        let b = f.bilinear(f.extent().clamp(l.annotated))?;
        let x = f.gather(&b);
        let scores: Vec<f64> = head.cls.forward(&x).into_iter().map(sigmoid).collect();
        total += focal_loss(&scores, l.category, gamma);
        if let Some(sink) = sink.as_deref_mut() {
            let d_logit: Vec<f64> = focal_loss_grad(&scores, l.category, gamma)
                .iter()
                .zip(&scores)
                .map(|(g, s)| g * s * (1.0 - s) / m)
                .collect();
            let dx = head.cls.backward(&x, &d_logit, &mut sink.head.cls);
            sink.features.scatter(&b, &dx);
        }
    }
    Ok(total / m)
}

/// Negative-class focal loss over each category's negative grid points,
/// normalized per [`NegNormalization`] (`num_objects` is floored at one).
pub fn loss_neg(
    f: &FeatureMap,
    negatives: &[NegativeSet],
    head: &CprHead,
    gamma: f64,
    num_objects: usize,
    normalization: NegNormalization,
    mut sink: Option<&mut HeadGradSink<'_>>,
) -> Result<f64> {
    let k = head.num_categories();
    let mut neg_mask = vec![false; f.height * f.width * k];
    let mut count = 0usize;
    for set in negatives {
        for &(x, y) in &set.points {
            neg_mask[(y * f.width + x) * k + set.category] = true;
            count += 1;
        }
    }
    let norm = match normalization {
        NegNormalization::Objects => num_objects.max(1) as f64,
        NegNormalization::Points => count.max(1) as f64,
    };
    let mut total = 0.0;
    for y in 0..f.height {
        for x in 0..f.width {
            let base = (y * f.width + x) * k;
            if !neg_mask[base..base + k].iter().any(|b| *b) {
                continue;
            }
            let feat = f.cell(x, y);
            let scores: Vec<f64> = head.cls.forward_f32(feat).into_iter().map(sigmoid).collect();
            let mut d_logit = vec![0.0; k];
            for c in 0..k {
                if neg_mask[base + c] {
                    total += focal_term(scores[c], false, gamma);
                    d_logit[c] = focal_term_grad(scores[c], false, gamma)
                        * scores[c]
                        * (1.0 - scores[c])
                        / norm;
                }
            }
            if let Some(sink) = sink.as_deref_mut() {
                let xv: Vec<f64> = feat.iter().map(|v| *v as f64).collect();
                let dx = head.cls.backward(&xv, &d_logit, &mut sink.head.cls);
                let cell = sink.features.cell_mut(x, y);
                cell.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(total / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CprLossTerms {
    pub mil: f64,
    pub ann: f64,
    pub neg: f64,
    pub total: f64,
}

/// Bags and per-category negatives for one set of sampling regions.
pub fn sample_stage(
    extent: MapExtent,
    regions: &[SamplingRegion],
    num_categories: usize,
    cfg: &CprLossConfig,
) -> Result<(Vec<PointBag>, Vec<NegativeSet>)> {
    let bags = regions
        .iter()
        .map(|r| build_bag_shaped(r, cfg.u0, extent, cfg.shape))
        .collect::<Result<Vec<_>>>()?;
    let negatives = (0..num_categories)
        .map(|c| build_negatives_shaped(c, regions, extent, cfg.shape))
        .collect();
    Ok((bags, negatives))
}

/// `L_MIL + α_ann·L_ann + α_neg·L_neg` for one image and one stage.
///
/// `regions[j]` is the sampling region of `labels[j]`.
pub fn loss_cpr(
    f: &FeatureMap,
    labels: &[ObjectLabel],
    regions: &[SamplingRegion],
    head: &CprHead,
    cfg: &CprLossConfig,
    mut sink: Option<&mut HeadGradSink<'_>>,
) -> Result<CprLossTerms> {
    assert_eq!(labels.len(), regions.len());
    let w = cfg.weights;
    let (bags, negatives) = sample_stage(f.extent(), regions, head.num_categories(), cfg)?;

    let k = head.num_categories();
    let mut terms = [0.0f64; 3];
    let scales = [1.0, w.alpha_ann, w.alpha_neg];
    let mut scratch = sink
        .as_ref()
        .map(|_| (CprHeadGrad::zeros_like(head), FeatureGrad::zeros_like(f)));
    for (t, term) in terms.iter_mut().enumerate() {
        let mut local = scratch.as_mut().map(|(h, g)| HeadGradSink {
            head: h,
            features: g,
        });
        let s = local.as_mut();
        *term = match t {
            0 => loss_mil(f, &bags, head, w.gamma, s)?,
            1 => loss_ann(f, labels, head, w.gamma, s)?,
            _ => loss_neg(f, &negatives, head, w.gamma, labels.len(), cfg.neg_normalization, s)?,
        };
        if let (Some(target), Some((h, g))) = (sink.as_deref_mut(), scratch.as_mut()) {
            add_scaled(&mut target.head.cls.weight, &mut h.cls.weight, scales[t]);
            add_scaled(&mut target.head.cls.bias, &mut h.cls.bias, scales[t]);
            add_scaled(&mut target.head.ins.weight, &mut h.ins.weight, scales[t]);
            add_scaled(&mut target.head.ins.bias, &mut h.ins.bias, scales[t]);
            add_scaled(&mut target.features.data, &mut g.data, scales[t]);
        }
    }
    debug_assert_eq!(k, negatives.len());
    let [mil, ann, neg] = terms;
    Ok(CprLossTerms {
        mil,
        ann,
        neg,
        total: mil + w.alpha_ann * ann + w.alpha_neg * neg,
    })
}

fn add_scaled(dst: &mut [f64], src: &mut [f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter_mut()) {
        *d += scale * *s;
        *s = 0.0;
    }
}

/// Gaussian-like target centered on an object, feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarTarget {
    pub category: usize,
    pub center: Point,
    /// Decay length `σ`, feature cells.
    pub sigma: f64,
}

/// Soft target map `H × W × K`: for every cell and category, the maximum of
/// `exp(-d / σ)` over the objects of that category (zero when there are none).
pub fn variance_supervision(
    targets: &[VarTarget],
    height: usize,
    width: usize,
    num_categories: usize,
) -> Vec<f64> {
    let mut g = vec![0.0; height * width * num_categories];
    for t in targets {
        let sigma = t.sigma.max(1e-6);
        for y in 0..height {
            for x in 0..width {
                let d = Point::new(x as f64, y as f64).dist(t.center);
                let v = (-d / sigma).exp();
                let slot = &mut g[(y * width + x) * num_categories + t.category];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarReduction {
    #[default]
    Sum,
    Mean,
}

/// Binary cross-entropy between the variance branch and a target map.
pub fn loss_var(
    f: &FeatureMap,
    var: &Linear,
    target: &[f64],
    reduction: VarReduction,
    mut sink: Option<(&mut LinearGrad, &mut FeatureGrad)>,
) -> f64 {
    let k = var.out_dim;
    assert_eq!(target.len(), f.height * f.width * k);
    let scale = match reduction {
        VarReduction::Sum => 1.0,
        VarReduction::Mean => 1.0 / target.len().max(1) as f64,
    };
    let mut total = 0.0;
    for y in 0..f.height {
        for x in 0..f.width {
            let feat = f.cell(x, y);
            let logits = var.forward_f32(feat);
            let base = (y * f.width + x) * k;
            let mut d_logit = vec![0.0; k];
            for c in 0..k {
                let g = target[base + c];
                let s = sigmoid(logits[c]);
                let sc = clamp_score(s);
                total -= g * sc.ln() + (1.0 - g) * (1.0 - sc).ln();
                d_logit[c] = (s - g) * scale;
            }
            if let Some((vg, fg)) = sink.as_mut() {
                let xv: Vec<f64> = feat.iter().map(|v| *v as f64).collect();
                let dx = var.backward(&xv, &d_logit, vg);
                fg.cell_mut(x, y).iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
    }
    total * scale
}

/// Variance-branch scores `H × W × K`.
pub fn variance_scores(f: &FeatureMap, var: &Linear) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.height * f.width * var.out_dim);
    for y in 0..f.height {
        for x in 0..f.width {
            out.extend(var.forward_f32(f.cell(x, y)).into_iter().map(sigmoid));
        }
    }
    out
}

/// Trained point refiner: extractor, heads and the category table they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerModel {
    pub extractor: ConvExtractor,
    pub heads: RefinerHeads,
    pub categories: Vec<Category>,
    /// Hash of the configuration the model was trained with.
    pub config_hash: String,
}

impl RefinerModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
