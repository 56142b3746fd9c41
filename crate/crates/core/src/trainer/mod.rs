//! Training loop, evaluation and inference.

mod config;
mod eval;

pub use config::{Ablation, LrSchedule, TrainConfig, CONFIG_KEYS};
pub use eval::{
    evaluate, infer, predict_image, write_curve_csv, write_metrics_csv, EvalReport, InferOutputs, ModelPredictor,
    Prediction, Predictor, Stage, DEFAULT_MAX_TILE,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::datasets::{batch_images, random_crop_flip, sample_rng, Sample};
use crate::label_gen::{direction_map_conv, structure_target, BinaryMask, DirectionParams};
use crate::losses::{hybrid_loss_grad, LossReport, Targets};
use crate::metrics::{default_thresholds, Aggregation};
use crate::network::{save_checkpoint, Model};
use crate::nn::{cosine_lr, zero_grads, Adam, Mode};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const DIVERGED_CHECKPOINT: &str = "diverged.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Direction and structure targets for a batch of masks.
pub fn make_targets(masks: Vec<BinaryMask>, params: &DirectionParams, scale: usize) -> Result<Targets> {
    let directions = masks.iter().map(|m| direction_map_conv(m, params)).collect();
    let structures = masks
        .iter()
        .map(|m| structure_target(m, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(Targets {
        masks,
        directions,
        structures,
    })
}

/// Deterministically holds out `fraction` of the samples (at least one when
/// there are two or more) for validation.
pub fn split_validation(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, u32::MAX as u64, 0));
    let held: std::collections::HashSet<usize> = order[..k].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if held.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    /// Micro F1 at threshold 0.5 on the validation images, if any.
    pub val_f1: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    optimizer: String,
    config: &'a TrainConfig,
    flat_config: Vec<(&'static str, String)>,
    train_images: usize,
    val_images: usize,
}

pub fn write_log_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "iter,l_seg,l_struct,l_direct,l_ref,total")
}

pub fn write_log_row(w: &mut impl Write, row: &LogRow) -> std::io::Result<()> {
    let r = &row.report;
    writeln!(w, "{},{},{},{},{},{}", row.iter, r.l_seg, r.l_struct, r.l_direct, r.l_ref, r.total)
}

/// One sweep of crops: `crops_per_image` random crops of every training image,
/// in an epoch-seeded random order.
fn epoch_crops(config: &TrainConfig, train: &[Sample], epoch: usize) -> Result<Vec<Sample>> {
    let aug = &config.augment;
    let seed = config.seed ^ aug.seed.rotate_left(32);
    let mut crops = Vec::with_capacity(train.len() * aug.crops_per_image);
    for (i, s) in train.iter().enumerate() {
        for k in 0..aug.crops_per_image {
            let index = (i * aug.crops_per_image + k) as u64;
            crops.push(random_crop_flip(s, aug, &mut sample_rng(seed, epoch as u64 + 1, index))?);
        }
    }
    crops.shuffle(&mut sample_rng(seed, epoch as u64 + 1, u32::MAX as u64));
    Ok(crops)
}

/// Trains a fresh model. Writes the iteration log, a manifest, the best
/// checkpoint by validation F1 and the final checkpoint into `out_dir`.
pub fn train(config: &TrainConfig, train: &[Sample], val: &[Sample], out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let net = config.network_config();
    let params = config.direction_params()?;
    let mut model = Model::<f32>::new(&net, config.seed)?;
    let mut adam = Adam::<f32>::default();

    let manifest = Manifest {
        tool: "diresnet",
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        optimizer: format!(
            "adam(beta1={}, beta2={}, eps={}), lr={}, schedule={:?}",
            adam.beta1, adam.beta2, adam.eps, config.learning_rate, config.lr_schedule
        ),
        config,
        flat_config: config.entries(),
        train_images: train.len(),
        val_images: val.len(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&manifest_path, e))?;

    let log_path = out_dir.join(LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_file = std::io::BufWriter::new(file);
    write_log_header(&mut log_file).map_err(|e| Error::io(&log_path, e))?;

    let per_epoch = (train.len() * config.augment.crops_per_image).div_ceil(config.batch_size);
    let total_iters = per_epoch * config.epochs;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut log = Vec::with_capacity(total_iters);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut iter = 0;

    for epoch in 0..config.epochs {
        let crops = epoch_crops(config, train, epoch)?;
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in crops.chunks(config.batch_size) {
            let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let x = batch_images::<f32>(&images)?;
            let targets = make_targets(chunk.iter().map(|s| s.mask.clone()).collect(), &params, net.downsample)?;
            let out = model.forward(&x, Mode::Train)?;
            let (report, grads) = hybrid_loss_grad(&out, &targets, &config.weights)?;
            if !report.total.is_finite() {
                // The weights still hold the last finite state.
                let saved = out_dir.join(DIVERGED_CHECKPOINT);
                let saved = save_checkpoint(&mut model, &saved).ok().map(|_| saved);
                log_file.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(Error::Diverged { iteration: iter, saved });
            }
            zero_grads(&mut model);
            model.backward(&grads);
            let lr = match config.lr_schedule {
                LrSchedule::Constant => config.learning_rate,
                LrSchedule::Cosine => cosine_lr(config.learning_rate, iter, total_iters),
            };
            adam.step(&mut model, lr);
            let row = LogRow { iter, report };
            write_log_row(&mut log_file, &row).map_err(|e| Error::io(&log_path, e))?;
            log.push(row);
            epoch_total += report.total;
            batches += 1;
            iter += 1;
        }
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;

        let val_f1 = if val.is_empty() {
            None
        } else {
            let mut predictor = ModelPredictor::new(&mut model);
            let report = evaluate(&mut predictor, val.iter().cloned().map(Ok), &default_thresholds())?;
            Some(report.at_half(Aggregation::Micro).f1)
        };
        let summary = EpochSummary {
            epoch,
            mean_total: epoch_total / batches.max(1) as f64,
            val_f1,
        };
        log::info!(
            "epoch {}/{}: mean loss {:.4}{}",
            epoch + 1,
            config.epochs,
            summary.mean_total,
            val_f1.map(|f| format!(", val F1 {f:.4}")).unwrap_or_default()
        );
        epochs.push(summary);
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        if val_f1.is_none() || best.is_none_or(|(b, _)| score > b) {
            best = Some((score, epoch));
            save_checkpoint(&mut model, &best_path)?;
        }
    }
    save_checkpoint(&mut model, &last_path)?;
    let (best_score, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log,
        epochs,
        best_epoch,
        best_val_f1: best_score.is_finite().then_some(best_score),
    })
}
