//! Stage orchestration with on-disk artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{train,test}/        synthetic images + annotations.json
//! points/coarse.json        training set with coarse points
//! refiner/model.json        refiner checkpoint
//! points/refined.json       training set with refined points
//! localizer/model.json      localizer checkpoint
//! eval/predictions.json     test predictions
//! eval/metrics.{json,txt}   metric table
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{generate_coarse_points, load_dataset, save_dataset, Dataset, DatasetFormat};
use crate::error::{Error, Result};
use crate::eval::{map_report, MapReport};
use crate::features::{ConvExtractor, ImageTensor};
use crate::localizer::{load_predictions, save_predictions, train_localizer, ImagePredictions, LocalizerModel};
use crate::refine::{
    cprpp_infer, iterative_cpr, new_refiner, train_refiner, Objective, PointLabel, TrainSample,
};
use crate::refiner::RefinerModel;
use crate::synth::write_synth;

pub const STAGES: [&str; 7] = [
    "synth",
    "gen-points",
    "train-refiner",
    "refine",
    "train-localizer",
    "evaluate",
    "visualize",
];

/// Record of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub artifacts: BTreeMap<String, Vec<PathBuf>>,
    /// Wall-clock seconds per executed stage.
    pub timings: BTreeMap<String, f64>,
    /// Stages reused from an earlier run with the same configuration.
    #[serde(default)]
    pub reused: Vec<String>,
}

/// `git describe`-style version of the running build.
pub fn version_string() -> String {
    let pkg = format!("v{}", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) if d.starts_with('v') => d,
        Some(d) => format!("{pkg}-g{d}"),
        None => pkg,
    }
}

fn stage_err(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    hash: String,
    force: bool,
    manifest: RunManifest,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.out_dir.clone();
        let hash = config.hash();
        let manifest_path = out.join("manifest.json");
        let mut manifest = std::fs::read_to_string(&manifest_path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_hash == hash)
            .unwrap_or_default();
        manifest.config_hash = hash.clone();
        manifest.version = version_string();
        manifest.reused.clear();
        Ok(Pipeline {
            config,
            out,
            hash,
            force: false,
            manifest,
        })
    }

    /// Re-run stages even when their artifacts are up to date.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn fresh(&self, stage: &str) -> bool {
        !self.force
            && self
                .manifest
                .artifacts
                .get(stage)
                .is_some_and(|paths| !paths.is_empty() && paths.iter().all(|p| p.exists()))
    }

    fn record(&mut self, stage: &str, started: Instant, artifacts: Vec<PathBuf>) -> Result<()> {
        self.manifest
            .timings
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        self.manifest.artifacts.insert(stage.to_string(), artifacts);
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    fn run_stage<T>(
        &mut self,
        stage: &'static str,
        body: impl FnOnce(&Self) -> Result<(T, Vec<PathBuf>)>,
        reuse: impl FnOnce(&Self) -> Result<T>,
    ) -> Result<T> {
        if self.fresh(stage) {
            log::info!("{stage}: up to date, reusing artifacts");
            self.manifest.reused.push(stage.to_string());
            return reuse(self).map_err(stage_err(stage));
        }
        log::info!("{stage}: running");
        let started = Instant::now();
        let (value, artifacts) = body(self).map_err(stage_err(stage))?;
        self.record(stage, started, artifacts).map_err(stage_err(stage))?;
        Ok(value)
    }

    fn train_paths(&self) -> (PathBuf, PathBuf) {
        if self.config.dataset == "synthetic" {
            (self.path("data/train/annotations.json"), self.path("data/train/images"))
        } else {
            (
                self.config.train_annotations.clone().unwrap(),
                self.config.train_images.clone().unwrap(),
            )
        }
    }

    fn test_paths(&self) -> (PathBuf, PathBuf) {
        if self.config.dataset == "synthetic" {
            (self.path("data/test/annotations.json"), self.path("data/test/images"))
        } else {
            (
                self.config.test_annotations.clone().unwrap(),
                self.config.test_images.clone().unwrap(),
            )
        }
    }

    fn format(&self) -> Result<DatasetFormat> {
        if self.config.dataset == "synthetic" {
            Ok(DatasetFormat::Internal)
        } else {
            self.config.dataset_format.parse()
        }
    }

    /// Writes the synthetic train and test sets; a no-op for file datasets.
    pub fn synth(&mut self) -> Result<()> {
        if self.config.dataset != "synthetic" {
            log::info!("synth: dataset is read from disk, nothing to generate");
            return Ok(());
        }
        self.run_stage(
            "synth",
            |p| {
                let train = p.path("data/train");
                let test = p.path("data/test");
                write_synth(&p.config.synth_train(), &train)?;
                write_synth(&p.config.synth_test(), &test)?;
                Ok(((), vec![train.join("annotations.json"), test.join("annotations.json")]))
            },
            |_| Ok(()),
        )
    }

    pub fn gen_points(&mut self) -> Result<Dataset> {
        self.run_stage(
            "gen-points",
            |p| {
                let (ann, _) = p.train_paths();
                let mut ds = load_dataset(&ann, p.format()?)?;
                let fallbacks = generate_coarse_points(&mut ds, p.config.seed, p.config.rg_sigma)?;
                if fallbacks > 0 {
                    log::warn!("{fallbacks} objects fell back to their mask centroid");
                }
                let out = p.path("points/coarse.json");
                save_dataset(&ds, &out)?;
                Ok((ds, vec![out]))
            },
            |p| load_dataset(&p.path("points/coarse.json"), DatasetFormat::Internal),
        )
    }

    fn coarse(&self) -> Result<Dataset> {
        load_dataset(&self.path("points/coarse.json"), DatasetFormat::Internal)
    }

    pub fn train_samples(&self, ds: &Dataset) -> Result<Vec<TrainSample>> {
        load_samples(ds, &self.train_paths().1)
    }

    fn new_refiner_model(&self, ds: &Dataset, round: usize) -> Result<RefinerModel> {
        let seed = self.config.seed.wrapping_add(round as u64 * 7919);
        let ex = ConvExtractor::new(self.config.extractor(), seed ^ 0xE1)?;
        Ok(new_refiner(ex, &ds.categories, self.config.stages, seed ^ 0xE2, self.hash.clone()))
    }

    pub fn train_refiner(&mut self) -> Result<()> {
        if self.config.skip_refine {
            log::info!("train-refiner: skipped by configuration");
            return Ok(());
        }
        if self.config.iterations > 1 {
            log::info!("train-refiner: iterative refinement trains inside the refine stage");
            return Ok(());
        }
        self.run_stage(
            "train-refiner",
            |p| {
                let ds = p.coarse()?;
                let samples = p.train_samples(&ds)?;
                let mut model = p.new_refiner_model(&ds, 0)?;
                train_refiner(
                    &mut model,
                    &samples,
                    &p.config.cascade(),
                    &p.config.refiner_schedule(),
                    Objective::Cascade,
                )?;
                let path = p.path("refiner/model.json");
                model.save(&path)?;
                Ok(((), vec![path]))
            },
            |_| Ok(()),
        )
    }

    pub fn refine(&mut self) -> Result<Dataset> {
        self.run_stage(
            "refine",
            |p| {
                let ds = p.coarse()?;
                let out = p.path("points/refined.json");
                let refined = if p.config.skip_refine {
                    ds
                } else if p.config.iterations > 1 {
                    let samples = p.train_samples(&ds)?;
                    let c = p.config.cascade();
                    let (refined, reports) = iterative_cpr(
                        &ds,
                        &samples,
                        c.r_init,
                        &c.loss,
                        &c.infer,
                        &p.config.refiner_schedule(),
                        p.config.iterations,
                        |round| p.new_refiner_model(&ds, round),
                    )?;
                    let log_path = p.path("points/iterations.json");
                    let rows: Vec<_> = reports
                        .iter()
                        .map(|r| serde_json::json!({"iteration": r.iteration, "mean_displacement": r.mean_displacement}))
                        .collect();
                    std::fs::write(&log_path, serde_json::to_string_pretty(&rows)?)
                        .map_err(|e| Error::io(&log_path, e))?;
                    refined
                } else {
                    let model = RefinerModel::load(&p.path("refiner/model.json"))?;
                    if model.config_hash != p.hash {
                        return Err(Error::Checkpoint(
                            "refiner checkpoint was trained with a different configuration".into(),
                        ));
                    }
                    let samples = p.train_samples(&ds)?;
                    cprpp_infer(&model, &ds, &samples, &p.config.cascade())?
                };
                save_dataset(&refined, &out)?;
                Ok((refined, vec![out]))
            },
            |p| load_dataset(&p.path("points/refined.json"), DatasetFormat::Internal),
        )
    }

    pub fn train_localizer(&mut self) -> Result<()> {
        self.run_stage(
            "train-localizer",
            |p| {
                let ds = load_dataset(&p.path("points/refined.json"), DatasetFormat::Internal)?;
                let samples = p.train_samples(&ds)?;
                let ex = ConvExtractor::new(p.config.extractor(), p.config.seed ^ 0x10C1)?;
                let mut model = LocalizerModel::new(ex, &ds.categories, p.config.seed ^ 0x10C2, p.hash.clone());
                train_localizer(&mut model, &samples, &p.config.localizer(), &p.config.localizer_schedule())?;
                let path = p.path("localizer/model.json");
                model.save(&path)?;
                Ok(((), vec![path]))
            },
            |_| Ok(()),
        )
    }

    pub fn test_set(&self) -> Result<Dataset> {
        let (ann, _) = self.test_paths();
        load_dataset(&ann, self.format()?)
    }

    pub fn evaluate(&mut self) -> Result<MapReport> {
        self.run_stage(
            "evaluate",
            |p| {
                let test = p.test_set()?;
                let model = LocalizerModel::load(&p.path("localizer/model.json"))?;
                let cfg = p.config.localizer();
                let (_, dir) = p.test_paths();
                let mut preds = Vec::with_capacity(test.images.len());
                for img in &test.images {
                    let t = load_image(&dir, &img.file_name)?;
                    preds.push(ImagePredictions {
                        image_id: img.image_id,
                        predictions: model.predict(&t, &cfg)?,
                    });
                }
                let pred_path = p.path("eval/predictions.json");
                save_predictions(&preds, &pred_path)?;
                let report = map_report(&preds, &test, &p.config.taus)?;
                report.save(&p.path("eval"))?;
                Ok((
                    report,
                    vec![pred_path, p.path("eval/metrics.json"), p.path("eval/metrics.txt")],
                ))
            },
            |p| {
                let text = std::fs::read_to_string(p.path("eval/metrics.json"))
                    .map_err(|e| Error::io(p.path("eval/metrics.json"), e))?;
                Ok(serde_json::from_str(&text)?)
            },
        )
    }

    pub fn predictions(&self) -> Result<Vec<ImagePredictions>> {
        load_predictions(&self.path("eval/predictions.json"))
    }

    /// Every stage from data generation to evaluation.
    pub fn run(&mut self) -> Result<(RunManifest, MapReport)> {
        self.synth()?;
        self.gen_points()?;
        self.train_refiner()?;
        self.refine()?;
        self.train_localizer()?;
        let report = self.evaluate()?;
        Ok((self.manifest.clone(), report))
    }
}

pub fn load_image(dir: &Path, file_name: &str) -> Result<ImageTensor> {
    let path = dir.join(file_name);
    let img = image::open(&path)
        .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    Ok(ImageTensor::from_rgb(&img))
}

/// Images of a dataset paired with its current points.
pub fn load_samples(ds: &Dataset, image_dir: &Path) -> Result<Vec<TrainSample>> {
    ds.images
        .iter()
        .map(|img| {
            Ok(TrainSample {
                image_id: img.image_id,
                image: load_image(image_dir, &img.file_name)?,
                labels: img.coarse_points.iter().map(PointLabel::from_coarse).collect(),
            })
        })
        .collect()
}
