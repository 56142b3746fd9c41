use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::datasets::{batch_images, Sample};
use crate::io::{write_gray, RgbImage};
use crate::metrics::{break_even_point, Aggregation, BreakEven, CurveAccumulator, Metrics, PrCurve, ProbMap};
use crate::network::Model;
use crate::nn::Mode;
use crate::{Error, Result};

/// Images larger than this along either side are processed in tiles.
pub const DEFAULT_MAX_TILE: usize = 1024;
const TILE_OVERLAP: usize = 64;

/// Anything that maps an image to a road probability map.
pub trait Predictor {
    fn predict(&mut self, image: &RgbImage) -> Result<ProbMap>;
}

/// The three maps produced for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Output of the last stage (refined when a refiner exists).
    pub prob: ProbMap,
    /// `sigmoid(seg_logits)` before refinement.
    pub seg_prob: ProbMap,
    /// Channelwise sum of the direction logits, if the model has a direction head.
    pub salience: Option<ProbMap>,
}

fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - TILE_OVERLAP;
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Full-image prediction. The image is zero-padded at the bottom and right to
/// the network's size multiple, and split into overlapping tiles averaged
/// together when a side exceeds `max_tile`.
pub fn predict_image(model: &mut Model<f32>, image: &RgbImage, max_tile: usize) -> Result<Prediction> {
    let m = model.config().downsample;
    let max_tile = (max_tile / m * m).max(m).max(TILE_OVERLAP + m);
    let (h, w) = (image.height, image.width);
    let tile_h = if h > max_tile { max_tile } else { h };
    let tile_w = if w > max_tile { max_tile } else { w };
    let mut sum_prob = vec![0.0f32; h * w];
    let mut sum_seg = vec![0.0f32; h * w];
    let mut sum_sal = vec![0.0f32; h * w];
    let mut count = vec![0.0f32; h * w];
    let mut has_salience = false;
    for &top in &tile_starts(h, tile_h) {
        for &left in &tile_starts(w, tile_w) {
            let tile = image.crop(top, left, tile_h, tile_w);
            let padded = tile.pad_to(tile_h.div_ceil(m) * m, tile_w.div_ceil(m) * m);
            let x = batch_images::<f32>(&[&padded])?;
            let out = model.forward(&x, Mode::Eval)?;
            let prob = out.final_prob();
            let seg = out.seg_prob();
            let sal = out.direction_salience();
            has_salience = sal.is_some();
            let pw = padded.width;
            for i in 0..tile_h {
                for j in 0..tile_w {
                    let src = i * pw + j;
                    let dst = (top + i) * w + left + j;
                    sum_prob[dst] += prob.data()[src];
                    sum_seg[dst] += seg.data()[src];
                    if let Some(s) = &sal {
                        sum_sal[dst] += s.data()[src];
                    }
                    count[dst] += 1.0;
                }
            }
        }
    }
    let avg = |sum: Vec<f32>| -> Vec<f32> { sum.iter().zip(&count).map(|(s, c)| s / c).collect() };
    Ok(Prediction {
        prob: ProbMap::new(h, w, avg(sum_prob))?,
        seg_prob: ProbMap::new(h, w, avg(sum_seg))?,
        salience: if has_salience { Some(ProbMap::new(h, w, avg(sum_sal))?) } else { None },
    })
}

/// Which probability a [`ModelPredictor`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Refined if the model has a refiner.
    Final,
    /// `sigmoid(seg_logits)`.
    Unrefined,
}

pub struct ModelPredictor<'a> {
    model: &'a mut Model<f32>,
    pub stage: Stage,
    pub max_tile: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a mut Model<f32>) -> Self {
        Self {
            model,
            stage: Stage::Final,
            max_tile: DEFAULT_MAX_TILE,
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, image: &RgbImage) -> Result<ProbMap> {
        let p = predict_image(self.model, image, self.max_tile)?;
        Ok(match self.stage {
            Stage::Final => p.prob,
            Stage::Unrefined => p.seg_prob,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub thresholds: Vec<f64>,
    /// Metrics at every threshold with pooled counts.
    pub micro: Vec<Metrics>,
    /// Metrics at every threshold averaged over images.
    pub per_image: Vec<Metrics>,
    pub curve: PrCurve,
    pub bep: BreakEven,
}

impl EvalReport {
    /// Metrics at the threshold closest to 0.5.
    pub fn at_half(&self, aggregation: Aggregation) -> Metrics {
        let i = self
            .thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
            .map(|(i, _)| i)
            .expect("non-empty thresholds");
        match aggregation {
            Aggregation::Micro => self.micro[i],
            Aggregation::PerImage => self.per_image[i],
        }
    }
}

/// Runs the predictor over every sample and aggregates metrics over thresholds.
pub fn evaluate(
    predictor: &mut dyn Predictor,
    samples: impl IntoIterator<Item = Result<Sample>>,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let mut acc = CurveAccumulator::new(thresholds.to_vec())?;
    for sample in samples {
        let s = sample?;
        let prob = predictor.predict(&s.image)?;
        acc.add(&prob, &s.mask)?;
    }
    if acc.images() == 0 {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let curve = acc.micro_curve();
    let bep = break_even_point(&curve)?;
    let metrics = |agg| -> Vec<Metrics> {
        thresholds
            .iter()
            .map(|&t| acc.metrics(t, agg).expect("accumulated threshold"))
            .collect()
    };
    Ok(EvalReport {
        images: acc.images(),
        thresholds: thresholds.to_vec(),
        micro: metrics(Aggregation::Micro),
        per_image: metrics(Aggregation::PerImage),
        curve,
        bep,
    })
}

fn csv_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// `method,threshold,precision,recall,f1,oa,bep` with a micro row and a
/// per-image row (method suffixed `:per-image`) at threshold 0.5.
pub fn write_metrics_csv(path: &Path, method: &str, report: &EvalReport) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = csv_file(path)?;
    writeln!(w, "method,threshold,precision,recall,f1,oa,bep").map_err(io)?;
    for (name, agg) in [
        (method.to_string(), Aggregation::Micro),
        (format!("{method}:per-image"), Aggregation::PerImage),
    ] {
        let m = report.at_half(agg);
        writeln!(
            w,
            "{name},0.5,{},{},{},{},{}",
            m.precision, m.recall, m.f1, m.oa, report.bep.value
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `threshold,precision,recall,oa` for every curve point.
pub fn write_curve_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = csv_file(path)?;
    writeln!(w, "threshold,precision,recall,oa").map_err(io)?;
    for p in &curve.points {
        writeln!(w, "{},{},{},{}", p.threshold, p.precision, p.recall, p.oa).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug)]
pub struct InferOutputs {
    pub prob: PathBuf,
    pub refined: PathBuf,
    pub salience: Option<PathBuf>,
    pub prediction: Prediction,
}

/// Min-max normalization to 8 bits; a constant map becomes all zeros.
fn normalized_u8(map: &ProbMap) -> Vec<u8> {
    let (lo, hi) = map
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    map.values()
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Writes `prob.png` (before refinement), `refined.png` (last stage) and,
/// with a direction head, `salience.png` into `out_dir`.
pub fn infer(model: &mut Model<f32>, image: &RgbImage, out_dir: &Path, max_tile: usize) -> Result<InferOutputs> {
    let prediction = predict_image(model, image, max_tile)?;
    let (h, w) = (image.height, image.width);
    let prob = out_dir.join("prob.png");
    let refined = out_dir.join("refined.png");
    write_gray(&prob, h, w, &prediction.seg_prob.to_u8())?;
    write_gray(&refined, h, w, &prediction.prob.to_u8())?;
    let salience = match &prediction.salience {
        Some(s) => {
            let path = out_dir.join("salience.png");
            write_gray(&path, h, w, &normalized_u8(s))?;
            Some(path)
        }
        None => None,
    };
    Ok(InferOutputs {
        prob,
        refined,
        salience,
        prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_gen::BinaryMask;
    use crate::metrics::default_thresholds;
    use crate::network::NetworkConfig;

    struct Oracle(Vec<BinaryMask>, usize);

    impl Predictor for Oracle {
        fn predict(&mut self, _: &RgbImage) -> Result<ProbMap> {
            self.1 += 1;
            Ok(ProbMap::from_mask(&self.0[self.1 - 1]))
        }
    }

    struct Constant(f32);

    impl Predictor for Constant {
        fn predict(&mut self, image: &RgbImage) -> Result<ProbMap> {
            Ok(ProbMap::constant(image.height, image.width, self.0))
        }
    }

    fn samples() -> Vec<Sample> {
        (0..3)
            .map(|k| {
                let mask = BinaryMask::from_fn(8, 8, |i, j| (i + k) % 4 == 0 || j == k);
                Sample::new(format!("{k}"), RgbImage::zeros(8, 8), mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let s = samples();
        let mut oracle = Oracle(s.iter().map(|x| x.mask.clone()).collect(), 0);
        let r = evaluate(&mut oracle, s.into_iter().map(Ok), &default_thresholds()).unwrap();
        assert_eq!(r.at_half(Aggregation::Micro).f1, 1.0);
        assert_eq!(r.at_half(Aggregation::PerImage).f1, 1.0);
    }

    #[test]
    fn constant_half_predictor_oa_above_half_is_background_fraction() {
        let s = samples();
        let bg = s.iter().map(|x| 64 - x.mask.count_ones()).sum::<usize>() as f64 / 192.0;
        let r = evaluate(&mut Constant(0.5), s.into_iter().map(Ok), &default_thresholds()).unwrap();
        let i = r.thresholds.iter().position(|&t| t > 0.5).unwrap();
        assert_eq!(r.micro[i].oa, bg);
        assert!(r.curve.points.iter().filter(|p| p.defined).all(|p| {
            let lo = r.curve.points.iter().map(|q| q.precision).fold(1.0, f64::min);
            let hi = r.curve.points.iter().map(|q| q.precision).fold(0.0, f64::max);
            (lo..=hi).contains(&p.precision)
        }));
    }

    #[test]
    fn tiling_matches_untiled_prediction_shape_and_range() {
        let cfg = NetworkConfig { width: 4, enable_refiner: false, ..NetworkConfig::default() };
        let mut model = Model::<f32>::new(&cfg, 1).unwrap();
        let img = RgbImage::new(100, 90, (0..3 * 9000).map(|k| (k % 17) as f32 / 16.0).collect()).unwrap();
        let tiled = predict_image(&mut model, &img, 72).unwrap();
        let whole = predict_image(&mut model, &img, 4096).unwrap();
        assert_eq!((tiled.prob.height(), tiled.prob.width()), (100, 90));
        assert!(tiled.prob.values().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(whole.prob, whole.seg_prob);
    }

    #[test]
    fn tile_starts_cover_the_axis() {
        assert_eq!(tile_starts(50, 64), vec![0]);
        let s = tile_starts(300, 128);
        assert_eq!(*s.last().unwrap() + 128, 300);
        assert!(s.windows(2).all(|w| w[1] - w[0] <= 128 - TILE_OVERLAP));
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(evaluate(&mut Constant(0.5), Vec::new(), &default_thresholds()).is_err());
    }
}
