//! Experiment configuration: one flat TOML table drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::ExtractorConfig;
use crate::geometry::SamplingShape;
use crate::localizer::LocalizerConfig;
use crate::nn::AdamConfig;
use crate::refine::{CascadeConfig, CascadeMode, InferConfig, NearestScope, TrainSchedule};
use crate::refiner::{CprLossConfig, LossWeights, NegNormalization, VarReduction};
use crate::synth::SynthParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    /// `"synthetic"` generates data; otherwise the four paths below are read.
    pub dataset: String,
    pub dataset_format: String,
    pub train_annotations: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub test_annotations: Option<PathBuf>,
    pub test_images: Option<PathBuf>,

    pub synth_train_images: usize,
    pub synth_test_images: usize,
    pub synth_categories: usize,
    pub synth_width: u32,
    pub synth_height: u32,
    pub synth_min_size: f64,
    pub synth_max_size: f64,
    pub synth_max_objects: usize,
    pub synth_clutter: f64,
    pub synth_min_gap: f64,

    pub rg_sigma: f64,

    pub stride: u32,
    pub stem_width: usize,
    pub feature_dim: usize,
    pub body_dilations: Vec<usize>,

    /// Train the localizer on the raw coarse points.
    pub skip_refine: bool,
    pub stages: usize,
    pub r_init: u32,
    pub mode: CascadeMode,
    pub u0: u32,
    pub shape: ShapeKind,
    pub rect_aspect: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub nearest: NearestScope,
    pub alpha_ann: f64,
    pub alpha_neg: f64,
    pub gamma: f64,
    pub neg_normalization: NegNormalization,
    pub var_loss: bool,
    pub var_sigma: Option<f64>,
    pub var_reduction: VarReduction,
    /// Rounds of train-from-scratch refinement; only for single-stage runs.
    pub iterations: usize,
    pub refiner_epochs: usize,
    pub refiner_batch: usize,
    pub refiner_lr: f64,

    pub loc_k: usize,
    pub loc_lambda_reg: f64,
    pub nms_box: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub loc_epochs: usize,
    pub loc_batch: usize,
    pub loc_lr: f64,

    pub flip: bool,
    pub taus: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: "synthetic".into(),
            dataset_format: "internal".into(),
            train_annotations: None,
            train_images: None,
            test_annotations: None,
            test_images: None,
            synth_train_images: 500,
            synth_test_images: 100,
            synth_categories: 3,
            synth_width: 160,
            synth_height: 160,
            synth_min_size: 8.0,
            synth_max_size: 120.0,
            synth_max_objects: 6,
            synth_clutter: 0.3,
            synth_min_gap: 2.0,
            rg_sigma: 0.25,
            stride: 8,
            stem_width: 16,
            feature_dim: 32,
            body_dilations: vec![1, 2, 4, 1],
            skip_refine: false,
            stages: 3,
            r_init: 8,
            mode: CascadeMode::CascadeII,
            u0: 8,
            shape: ShapeKind::Circle,
            rect_aspect: 1.0,
            delta1: 0.1,
            delta2: 0.5,
            nearest: NearestScope::SameCategory,
            alpha_ann: 0.5,
            alpha_neg: 3.0,
            gamma: 2.0,
            neg_normalization: NegNormalization::Objects,
            var_loss: true,
            var_sigma: None,
            var_reduction: VarReduction::Mean,
            iterations: 1,
            refiner_epochs: 24,
            refiner_batch: 4,
            refiner_lr: 1e-3,
            loc_k: 4,
            loc_lambda_reg: 1.0,
            nms_box: 16.0,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            loc_epochs: 24,
            loc_batch: 4,
            loc_lr: 1e-3,
            flip: true,
            taus: vec![0.5, 1.0, 2.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor().validate()?;
        self.cascade().validate()?;
        self.localizer().validate()?;
        if self.dataset == "synthetic" {
            self.synth_train().validate()?;
        } else {
            for (name, v) in [
                ("train_annotations", &self.train_annotations),
                ("train_images", &self.train_images),
                ("test_annotations", &self.test_annotations),
                ("test_images", &self.test_images),
            ] {
                if v.is_none() {
                    return Err(Error::Config(format!("{name} is required for dataset {}", self.dataset)));
                }
            }
            self.dataset_format.parse::<crate::dataset::DatasetFormat>()?;
        }
        if !(self.rg_sigma > 0.0) {
            return Err(Error::Config("rg_sigma must be positive".into()));
        }
        if self.iterations == 0 && !self.skip_refine {
            return Err(Error::Config("iterations must be at least 1 (use skip_refine to bypass)".into()));
        }
        if self.iterations > 1 && self.stages != 1 {
            return Err(Error::Config("iterations > 1 requires stages = 1".into()));
        }
        if self.shape == ShapeKind::Rect && !(self.rect_aspect > 0.0) {
            return Err(Error::Config("rect_aspect must be positive".into()));
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("taus must be a non-empty list of positive values".into()));
        }
        if self.refiner_batch == 0 || self.loc_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig {
            stride: self.stride,
            stem_width: self.stem_width,
            feature_dim: self.feature_dim,
            body_dilations: self.body_dilations.clone(),
        }
    }

    pub fn sampling_shape(&self) -> SamplingShape {
        match self.shape {
            ShapeKind::Circle => SamplingShape::Circle,
            ShapeKind::Rect => SamplingShape::Rect {
                aspect: self.rect_aspect,
            },
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            stages: self.stages,
            r_init: self.r_init,
            mode: self.mode,
            loss: CprLossConfig {
                weights: LossWeights {
                    alpha_ann: self.alpha_ann,
                    alpha_neg: self.alpha_neg,
                    gamma: self.gamma,
                },
                u0: self.u0,
                shape: self.sampling_shape(),
                neg_normalization: self.neg_normalization,
            },
            infer: InferConfig {
                delta1: self.delta1,
                delta2: self.delta2,
                nearest: self.nearest,
            },
            var_loss: self.var_loss,
            var_sigma: self.var_sigma,
            var_reduction: self.var_reduction,
        }
    }

    fn schedule(&self, epochs: usize, batch: usize, lr: f64, salt: u64) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size: batch,
            adam: AdamConfig {
                lr,
                ..Default::default()
            },
            lr_steps: vec![epochs * 2 / 3, epochs * 8 / 9],
            flip: self.flip,
            seed: self.seed ^ salt,
        }
    }

    pub fn refiner_schedule(&self) -> TrainSchedule {
        self.schedule(self.refiner_epochs, self.refiner_batch, self.refiner_lr, 0x0011)
    }

    pub fn localizer_schedule(&self) -> TrainSchedule {
        self.schedule(self.loc_epochs, self.loc_batch, self.loc_lr, 0x0022)
    }

    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            k: self.loc_k,
            lambda_reg: self.loc_lambda_reg,
            gamma: self.gamma,
            nms_box: self.nms_box,
            nms_iou: self.nms_iou,
            score_threshold: self.score_threshold,
            max_detections: self.max_detections,
        }
    }

    fn synth(&self, n: usize, seed: u64, first_id: u64) -> SynthParams {
        SynthParams {
            num_images: n,
            num_categories: self.synth_categories,
            width: self.synth_width,
            height: self.synth_height,
            min_size: self.synth_min_size,
            max_size: self.synth_max_size,
            max_objects: self.synth_max_objects,
            clutter: self.synth_clutter,
            min_gap: self.synth_min_gap,
            seed,
            first_id,
        }
    }

    pub fn synth_train(&self) -> SynthParams {
        self.synth(self.synth_train_images, self.seed.wrapping_mul(2).wrapping_add(1000), 0)
    }

    pub fn synth_test(&self) -> SynthParams {
        self.synth(self.synth_test_images, self.seed.wrapping_mul(2).wrapping_add(5001), 1_000_000)
    }
}
