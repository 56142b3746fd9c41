mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diresnet::datasets::{load_folder_dataset, synth_generate, write_dataset, Layout};
use diresnet::io::{read_mask, read_rgb, write_direction_map, write_gray};
use diresnet::metrics::uniform_thresholds;
use diresnet::trainer::{
    evaluate, infer, split_validation, write_curve_csv, write_metrics_csv, ModelPredictor, Stage, DEFAULT_MAX_TILE,
};
use diresnet::{
    direction_map_conv, direction_map_reference, load_checkpoint, structure_target, train, Aggregation, Architecture,
    DirectionParams, Error, SynthConfig,
};

/// Exit status for malformed input data, unreadable files and failed runs.
const EXIT_DATA: u8 = 2;
/// Exit status for invalid arguments or configuration values.
const EXIT_USAGE: u8 = 1;

/// Rejects device requests this build cannot honour.
const DEVICE_ENV: &str = "DIRESNET_DEVICE";

#[derive(Parser)]
#[command(name = "diresnet", version, about = "Direction-aware residual network for road extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the direction map (and optionally the structure target) for a road mask.
    Labelgen(LabelgenArgs),
    /// Write a synthetic aerial-image dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model; config-file values are overridden by flags.
    Train(Box<config::TrainArgs>),
    /// Evaluate a checkpoint, writing metrics.csv and curve.csv.
    Eval(EvalArgs),
    /// Run a checkpoint on one image, writing prob, refined and salience maps.
    Infer(InferArgs),
    /// Render precision-recall and OA-vs-threshold plots from curve.csv files.
    PlotCurves(PlotArgs),
}

#[derive(Args)]
struct LabelgenArgs {
    /// Road mask image; pixels above 127 are road.
    #[arg(long)]
    mask: PathBuf,
    /// Sampling radius of the direction kernel in pixels.
    #[arg(long, default_value_t = 9)]
    radius: usize,
    /// Angular resolution n, giving an angle step of pi/n.
    #[arg(long, default_value_t = 16)]
    angle_step_div: usize,
    /// Block size of the structure target.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Output direction map (8-bit indexed PNG, classes 0-4).
    #[arg(long)]
    out: PathBuf,
    /// Output structure target (8-bit grayscale, 255 x block road fraction).
    #[arg(long)]
    structure_out: Option<PathBuf>,
    /// Use the direct per-pixel loop instead of the convolutional form.
    #[arg(long)]
    reference: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of image/mask pairs.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Side length of each square image.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target fraction of road pixels hidden by occluders.
    #[arg(long, default_value_t = 0.15)]
    occlusion: f64,
    /// Standard deviation of pixel noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Micro,
    PerImage,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Micro => Aggregation::Micro,
            AggregationArg::PerImage => Aggregation::PerImage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    /// Output of the last stage (the refiner when present).
    Final,
    /// Segmentation head output before refinement.
    Unrefined,
}

#[derive(Clone, Copy, ValueEnum)]
pub(crate) enum LayoutArg {
    Massachusetts,
    Deepglobe,
    PairedGeneric,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Massachusetts => Layout::Massachusetts,
            LayoutArg::Deepglobe => Layout::DeepGlobe,
            LayoutArg::PairedGeneric => Layout::PairedGeneric,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "paired-generic")]
    layout: LayoutArg,
    /// Output directory for metrics.csv and curve.csv.
    #[arg(long)]
    out: PathBuf,
    /// Method name written to metrics.csv; defaults to the architecture.
    #[arg(long)]
    method: Option<String>,
    /// Aggregation reported on stdout; metrics.csv always holds both.
    #[arg(long, value_enum, default_value = "micro")]
    aggregation: AggregationArg,
    #[arg(long, value_enum, default_value = "final")]
    stage: StageArg,
    /// Number of uniformly spaced thresholds in [0, 1].
    #[arg(long, default_value_t = 101)]
    thresholds: usize,
    /// Largest tile side used for inference on big images.
    #[arg(long, default_value_t = DEFAULT_MAX_TILE)]
    max_tile: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Largest tile side used for inference on big images.
    #[arg(long, default_value_t = DEFAULT_MAX_TILE)]
    max_tile: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve files, optionally labelled as NAME=PATH; one line per file.
    #[arg(long = "curve", required = true)]
    curves: Vec<String>,
    /// Output directory for pr.png and oa.png.
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_USAGE };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match check_device().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn check_device() -> CliResult {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(Failure::usage(format!(
            "{DEVICE_ENV}={d:?} is not available; this build only runs on cpu"
        ))),
        _ => Ok(()),
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Labelgen(a) => labelgen(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer_cmd(a),
        Command::PlotCurves(a) => plot::plot_curves(&a.curves, &a.out),
    }
}

fn labelgen(a: LabelgenArgs) -> CliResult {
    let mask = read_mask(&a.mask)?;
    let params = DirectionParams::from_divisions(a.radius, a.angle_step_div)?;
    let map = if a.reference {
        direction_map_reference(&mask, &params)
    } else {
        direction_map_conv(&mask, &params)
    };
    write_direction_map(&a.out, &map)?;
    if let Some(path) = &a.structure_out {
        let t = structure_target(&mask, a.scale)?;
        let values: Vec<u8> = t.values().iter().map(|&v| (255.0 * v).round() as u8).collect();
        write_gray(path, t.height(), t.width(), &values)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let config = SynthConfig {
        image_size: a.size,
        n_images: a.n,
        occlusion_density: a.occlusion,
        noise_level: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let samples = synth_generate(&config)?;
    write_dataset(&samples, &a.out, &config)?;
    log::info!("wrote {} pairs to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_samples(root: &Path, layout: LayoutArg) -> CliResult<Vec<diresnet::Sample>> {
    let dataset = load_folder_dataset(root, layout.into())?;
    for missing in &dataset.report.missing_masks {
        log::warn!("no mask for {}", missing.display());
    }
    for w in &dataset.report.warnings {
        log::warn!("{w}");
    }
    if dataset.is_empty() {
        return Err(Failure::data(format!("no image/mask pairs found under {}", root.display())));
    }
    Ok(dataset.load_all()?)
}

fn train_cmd(a: config::TrainArgs) -> CliResult {
    let cfg = a.resolve()?;
    let samples = load_samples(&a.data, a.layout)?;
    let (train_set, val) = match &a.val_data {
        Some(dir) => (samples, load_samples(dir, a.layout)?),
        None => split_validation(samples, cfg.val_fraction, cfg.seed),
    };
    log::info!("training on {} images, validating on {}", train_set.len(), val.len());
    let out = train(&cfg, &train_set, &val, &a.out)?;
    match out.best_val_f1 {
        Some(f1) => log::info!("best validation F1 {f1:.4} at epoch {}", out.best_epoch),
        None => log::info!("no validation set; kept the last epoch"),
    }
    println!("{}", out.best_checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if a.thresholds < 2 {
        return Err(Failure::usage("--thresholds must be at least 2"));
    }
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?;
    let method = a.method.clone().unwrap_or_else(|| match model.config().architecture {
        Architecture::DiResNet => "diresnet".into(),
        Architecture::Fcn => "fcn".into(),
    });
    let dataset = load_folder_dataset(&a.data, a.layout.into())?;
    if dataset.is_empty() {
        return Err(Failure::data(format!("no image/mask pairs found under {}", a.data.display())));
    }
    let stage = match a.stage {
        StageArg::Final => Stage::Final,
        StageArg::Unrefined => Stage::Unrefined,
    };
    let mut predictor = ModelPredictor::new(&mut model).with_stage(stage);
    predictor.max_tile = a.max_tile;
    let samples = (0..dataset.len()).map(|i| dataset.load(i));
    let report = evaluate(&mut predictor, samples, &uniform_thresholds(a.thresholds))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    write_metrics_csv(&a.out.join("metrics.csv"), &method, &report)?;
    write_curve_csv(&a.out.join("curve.csv"), &report.curve)?;
    let m = report.at_half(a.aggregation.into());
    println!(
        "{method}: images={} precision={:.4} recall={:.4} f1={:.4} oa={:.4} bep={:.4}",
        report.images, m.precision, m.recall, m.f1, m.oa, report.bep.value
    );
    Ok(())
}

fn infer_cmd(a: InferArgs) -> CliResult {
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?;
    let image = read_rgb(&a.image)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    let out = infer(&mut model, &image, &a.out, a.max_tile)?;
    println!("{}", out.prob.display());
    println!("{}", out.refined.display());
    if let Some(s) = &out.salience {
        println!("{}", s.display());
    }
    Ok(())
}
