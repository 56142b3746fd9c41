//! Pixel-level precision, recall, F1 and overall accuracy, precision-recall
//! curves and the break-even point.

use serde::{Deserialize, Serialize};

use crate::label_gen::BinaryMask;
use crate::{Error, Result};

/// A single-channel probability raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            values: mask.to_f32(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Round to 8 bits, `0.0 -> 0` and `1.0 -> 255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

fn check_shapes(prob: &ProbMap, target: &BinaryMask) -> Result<()> {
    if prob.height != target.height() || prob.width != target.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but mask is {}x{}",
            prob.height,
            prob.width,
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Param(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

/// Pixels with `prob >= threshold` are predicted road.
pub fn confusion(prob: &ProbMap, target: &BinaryMask, threshold: f64) -> Result<ConfusionCounts> {
    check_shapes(prob, target)?;
    check_threshold(threshold)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in prob.values.iter().zip(target.data()) {
        match (p as f64 >= threshold, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision and recall are 0 when their denominators are 0.
pub fn prf_oa(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        oa: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    /// False when precision or recall had a zero denominator.
    pub defined: bool,
}

impl CurvePoint {
    pub fn new(threshold: f64, precision: f64, recall: f64, oa: f64) -> Self {
        Self {
            threshold,
            precision,
            recall,
            oa,
            defined: true,
        }
    }

    pub fn from_counts(threshold: f64, c: &ConfusionCounts) -> Self {
        let m = prf_oa(c);
        Self {
            threshold,
            precision: m.precision,
            recall: m.recall,
            oa: m.oa,
            defined: c.tp + c.fp > 0 && c.tp + c.fn_ > 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// The 101 thresholds 0.00, 0.01, ..., 1.00.
pub fn default_thresholds() -> Vec<f64> {
    uniform_thresholds(101)
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Param("empty threshold list".into()));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param("thresholds must be strictly increasing".into()));
    }
    Ok(())
}

pub fn pr_curve(prob: &ProbMap, target: &BinaryMask, thresholds: &[f64]) -> Result<PrCurve> {
    let mut acc = CurveAccumulator::new(thresholds.to_vec())?;
    acc.add(prob, target)?;
    Ok(acc.micro_curve())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub value: f64,
    /// False when precision and recall never cross and `value` is taken at the
    /// point where they are closest.
    pub crossing: bool,
}

/// Value where precision equals recall, linearly interpolated between the
/// first pair of adjacent defined points where `P - R` changes sign.
pub fn break_even_point(curve: &PrCurve) -> Result<BreakEven> {
    let pts: Vec<&CurvePoint> = curve.points.iter().filter(|p| p.defined).collect();
    if pts.is_empty() {
        return Err(Error::Data("precision-recall curve has no defined point".into()));
    }
    for (i, p) in pts.iter().enumerate() {
        let d0 = p.precision - p.recall;
        if d0 == 0.0 {
            return Ok(BreakEven {
                value: p.precision,
                crossing: true,
            });
        }
        if let Some(q) = pts.get(i + 1) {
            let d1 = q.precision - q.recall;
            if d0 * d1 < 0.0 {
                let lambda = d0 / (d0 - d1);
                return Ok(BreakEven {
                    value: p.precision + lambda * (q.precision - p.precision),
                    crossing: true,
                });
            }
        }
    }
    let closest = pts
        .iter()
        .min_by(|a, b| {
            (a.precision - a.recall)
                .abs()
                .total_cmp(&(b.precision - b.recall).abs())
        })
        .expect("non-empty");
    Ok(BreakEven {
        value: closest.precision,
        crossing: false,
    })
}

/// How per-image results are combined into dataset metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Pool confusion counts over all pixels of all images.
    Micro,
    /// Average per-image precision, recall, F1 and OA.
    PerImage,
}

/// Accumulates confusion counts at every threshold over a stream of images,
/// keeping both the pooled counts and per-image metrics.
#[derive(Clone, Debug)]
pub struct CurveAccumulator {
    thresholds: Vec<f64>,
    pooled: Vec<ConfusionCounts>,
    per_image: Vec<Vec<Metrics>>,
}

impl CurveAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        check_thresholds(&thresholds)?;
        let n = thresholds.len();
        Ok(Self {
            thresholds,
            pooled: vec![ConfusionCounts::default(); n],
            per_image: vec![Vec::new(); n],
        })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn images(&self) -> usize {
        self.per_image[0].len()
    }

    pub fn add(&mut self, prob: &ProbMap, target: &BinaryMask) -> Result<()> {
        check_shapes(prob, target)?;
        for (i, &t) in self.thresholds.iter().enumerate() {
            let c = confusion(prob, target, t)?;
            self.pooled[i] += c;
            self.per_image[i].push(prf_oa(&c));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CurveAccumulator) -> Result<()> {
        if self.thresholds != other.thresholds {
            return Err(Error::Param("cannot merge curves with different thresholds".into()));
        }
        for i in 0..self.thresholds.len() {
            self.pooled[i] += other.pooled[i];
            self.per_image[i].extend_from_slice(&other.per_image[i]);
        }
        Ok(())
    }

    fn index_of(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|&t| (t - threshold).abs() < 1e-12)
    }

    pub fn pooled_counts(&self, threshold: f64) -> Option<ConfusionCounts> {
        self.index_of(threshold).map(|i| self.pooled[i])
    }

    /// Metrics at one of the accumulated thresholds.
    pub fn metrics(&self, threshold: f64, aggregation: Aggregation) -> Option<Metrics> {
        let i = self.index_of(threshold)?;
        Some(match aggregation {
            Aggregation::Micro => prf_oa(&self.pooled[i]),
            Aggregation::PerImage => {
                let list = &self.per_image[i];
                let n = list.len().max(1) as f64;
                let mean = |f: fn(&Metrics) -> f64| list.iter().map(f).sum::<f64>() / n;
                Metrics {
                    precision: mean(|m| m.precision),
                    recall: mean(|m| m.recall),
                    f1: mean(|m| m.f1),
                    oa: mean(|m| m.oa),
                }
            }
        })
    }

    /// Curve of pooled counts.
    pub fn micro_curve(&self) -> PrCurve {
        PrCurve {
            points: self
                .thresholds
                .iter()
                .zip(&self.pooled)
                .map(|(&t, c)| CurvePoint::from_counts(t, c))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (ProbMap, BinaryMask) {
        let mask = BinaryMask::from_fn(4, 4, |i, j| i == j || i + j == 3);
        let prob = ProbMap::new(4, 4, (0..16).map(|k| (k % 5) as f32 / 4.0).collect()).unwrap();
        (prob, mask)
    }

    #[test]
    fn perfect_prediction() {
        let (_, mask) = pair();
        let c = confusion(&ProbMap::from_mask(&mask), &mask, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let m = prf_oa(&c);
        assert_eq!((m.precision, m.recall, m.f1, m.oa), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_positive_on_empty_mask() {
        let mask = BinaryMask::zeros(3, 5);
        let c = confusion(&ProbMap::constant(3, 5, 1.0), &mask, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 15, tn: 0, fn_: 0 });
    }

    #[test]
    fn degenerate_denominators() {
        let m = prf_oa(&ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 2 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.oa, 0.6);
    }

    #[test]
    fn harmonic_mean_of_reported_fcn_row() {
        assert!((f1_score(0.7425, 0.7893) - 0.7652).abs() < 5e-4);
    }

    #[test]
    fn shape_and_threshold_validation() {
        let (_, mask) = pair();
        let err = confusion(&ProbMap::constant(4, 5, 0.5), &mask, 0.5).unwrap_err();
        assert!(err.to_string().contains("4x5") && err.to_string().contains("4x4"));
        assert!(confusion(&ProbMap::from_mask(&mask), &mask, 1.5).is_err());
        assert!(CurveAccumulator::new(vec![]).is_err());
        assert!(CurveAccumulator::new(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn curve_endpoints() {
        let (prob, mask) = pair();
        let curve = pr_curve(&prob, &mask, &[0.0, 1.0]).unwrap();
        assert_eq!(curve.points[0].recall, 1.0);
        let exact = pr_curve(&ProbMap::from_mask(&mask), &mask, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((exact.points[1].precision, exact.points[1].recall), (1.0, 1.0));
        assert_eq!((exact.points[2].precision, exact.points[2].recall), (1.0, 1.0));
    }

    #[test]
    fn two_level_scores_give_three_operating_points() {
        let (_, mask) = pair();
        let prob = ProbMap::new(4, 4, (0..16).map(|k| if k % 3 == 0 { 0.8 } else { 0.2 }).collect()).unwrap();
        let curve = pr_curve(&prob, &mask, &uniform_thresholds(51)).unwrap();
        let mut ops: Vec<(u64, u64)> = Vec::new();
        for p in &curve.points {
            let key = (p.precision.to_bits(), p.recall.to_bits());
            if !ops.contains(&key) {
                ops.push(key);
            }
        }
        assert!(ops.len() <= 3, "{ops:?}");
    }

    #[test]
    fn break_even_examples() {
        let crossing = PrCurve {
            points: uniform_thresholds(11)
                .into_iter()
                .map(|t| CurvePoint::new(t, t, 1.0 - t, 0.0))
                .collect(),
        };
        let b = break_even_point(&crossing).unwrap();
        assert!((b.value - 0.5).abs() < 1e-9 && b.crossing);
        let two = PrCurve {
            points: vec![CurvePoint::new(0.2, 0.6, 0.9, 0.0), CurvePoint::new(0.8, 0.9, 0.6, 0.0)],
        };
        assert!((break_even_point(&two).unwrap().value - 0.75).abs() < 1e-12);
        let perfect = PrCurve {
            points: vec![CurvePoint::new(0.0, 0.5, 1.0, 0.0), CurvePoint::new(0.5, 1.0, 1.0, 1.0)],
        };
        assert_eq!(break_even_point(&perfect).unwrap().value, 1.0);
        let apart = PrCurve {
            points: vec![CurvePoint::new(0.0, 0.2, 0.9, 0.0), CurvePoint::new(0.5, 0.4, 0.8, 0.0)],
        };
        let b = break_even_point(&apart).unwrap();
        assert!(!b.crossing && b.value == 0.4);
    }

    #[test]
    fn per_image_and_micro_differ() {
        let a = BinaryMask::from_fn(2, 2, |i, _| i == 0);
        let b = BinaryMask::from_fn(2, 2, |_, _| true);
        let mut acc = CurveAccumulator::new(vec![0.5]).unwrap();
        acc.add(&ProbMap::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(), &a).unwrap();
        acc.add(&ProbMap::constant(2, 2, 1.0), &b).unwrap();
        let micro = acc.metrics(0.5, Aggregation::Micro).unwrap();
        let per = acc.metrics(0.5, Aggregation::PerImage).unwrap();
        assert_eq!(micro.recall, 5.0 / 6.0);
        assert_eq!(per.recall, 0.75);
    }
}
