use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cpr_core::config::ExperimentConfig;
use cpr_core::dataset::{load_dataset, DatasetFormat};
use cpr_core::pipeline::Pipeline;
use cpr_core::refiner::RefinerModel;
use cpr_core::visualize::{render_heatmaps, render_predictions, render_refined, View, VisualizeReport};

#[derive(Parser)]
#[command(name = "cpr", version, about = "Coarse point refinement and point-based localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Re-run stages whose artifacts are already up to date.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test sets.
    Synth,
    /// Simulate coarse point annotations on the training set.
    GenPoints,
    /// Train the point refiner on the coarse points.
    TrainRefiner,
    /// Refine the training points.
    Refine,
    /// Train the localizer on the refined points.
    TrainLocalizer,
    /// Predict on the test set and write the metric table.
    Evaluate,
    /// Render heatmaps, refined points or predictions.
    Visualize(VisualizeArgs),
    /// Run every stage from data generation to evaluation.
    Pipeline,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args)]
struct VisualizeArgs {
    /// heatmaps, refined-points or predictions
    #[arg(long, default_value = "refined-points")]
    view: String,
    /// Image ids to render; all images when omitted.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u64>,
    /// Predictions below this score are not drawn.
    #[arg(long, default_value_t = 0.3)]
    min_score: f64,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_image_dir(p: &Pipeline) -> PathBuf {
    match &p.config.train_images {
        Some(d) if p.config.dataset != "synthetic" => d.clone(),
        _ => p.path("data/train/images"),
    }
}

fn test_image_dir(p: &Pipeline) -> PathBuf {
    match &p.config.test_images {
        Some(d) if p.config.dataset != "synthetic" => d.clone(),
        _ => p.path("data/test/images"),
    }
}

fn internal(path: &Path) -> Result<cpr_core::dataset::Dataset> {
    load_dataset(path, DatasetFormat::Internal).with_context(|| format!("loading {}", path.display()))
}

fn visualize(p: &Pipeline, args: &VisualizeArgs) -> Result<VisualizeReport> {
    let view: View = args.view.parse()?;
    let dir = p.path("vis").join(&args.view);
    let report = match view {
        View::Heatmaps => {
            let model = RefinerModel::load(&p.path("refiner/model.json"))?;
            let ds = internal(&p.path("points/coarse.json"))?;
            render_heatmaps(&model, &ds, &train_image_dir(p), &args.ids, &dir)?
        }
        View::RefinedPoints => {
            let refined = internal(&p.path("points/refined.json"))?;
            let coarse = internal(&p.path("points/coarse.json")).ok();
            let model = RefinerModel::load(&p.path("refiner/model.json")).ok();
            let cascade = p.config.cascade();
            render_refined(
                &refined,
                coarse.as_ref(),
                model.as_ref().map(|m| (m, &cascade)),
                &train_image_dir(p),
                &args.ids,
                &dir,
            )?
        }
        View::Predictions => {
            let test = p.test_set()?;
            let preds = p.predictions()?;
            render_predictions(&test, &preds, args.min_score, &test_image_dir(p), &args.ids, &dir)?
        }
    };
    if !report.skipped.is_empty() {
        let ids: Vec<String> = report.skipped.iter().map(|i| i.to_string()).collect();
        eprintln!("skipped unknown image ids: {}", ids.join(", "));
    }
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common).context("stage config failed")?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut p = Pipeline::new(cfg).context("stage config failed")?.force(cli.common.force);
    match &cli.command {
        Command::Synth => p.synth()?,
        Command::GenPoints => {
            p.gen_points()?;
        }
        Command::TrainRefiner => p.train_refiner()?,
        Command::Refine => {
            p.refine()?;
        }
        Command::TrainLocalizer => p.train_localizer()?,
        Command::Evaluate => {
            let report = p.evaluate()?;
            print!("{}", report.to_table());
        }
        Command::Visualize(args) => {
            let report = visualize(&p, args).context("stage visualize failed")?;
            println!("wrote {} files to {}", report.written.len(), p.path("vis").join(&args.view).display());
        }
        Command::Pipeline => {
            let (manifest, report) = p.run()?;
            print!("{}", report.to_table());
            for (stage, secs) in &manifest.timings {
                log::info!("{stage}: {secs:.1}s");
            }
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
