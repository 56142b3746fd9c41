//! Segmentation, structure and direction losses and their weighted sum.
//!
//! Every term is a per-pixel mean so the default weights do not depend on the
//! crop size. Each loss also has a `*_grad` form returning the gradient with
//! respect to the network output it is applied to.

use serde::{Deserialize, Serialize};

use crate::label_gen::{BinaryMask, DirectionMap, StructureTarget, N_DIRECTIONS, NON_ROAD};
use crate::network::{ModelOutput, OutputGrads};
use crate::nn::kinks;
use crate::tensor::{sigmoid, Real, Shape, Tensor};
use crate::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Segmentation.
    pub alpha: f64,
    /// Structure.
    pub beta: f64,
    /// Direction.
    pub gamma: f64,
    /// Refinement.
    pub theta_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.2,
            theta_w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("theta_w", self.theta_w),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Param(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_struct: f64,
    pub l_direct: f64,
    pub l_ref: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(weights: &LossWeights, l_seg: f64, l_struct: f64, l_direct: f64, l_ref: f64) -> Self {
        Self {
            l_seg,
            l_struct,
            l_direct,
            l_ref,
            total: weights.alpha * l_seg + weights.beta * l_struct + weights.gamma * l_direct + weights.theta_w * l_ref,
        }
    }
}

/// Supervision for one batch, one entry per sample.
#[derive(Clone, Debug)]
pub struct Targets {
    pub masks: Vec<BinaryMask>,
    pub directions: Vec<DirectionMap>,
    pub structures: Vec<StructureTarget>,
}

fn check_plane<T: Real>(what: &str, t: &Tensor<T>, channels: usize, batch: usize, h: usize, w: usize) -> Result<()> {
    let want = Shape::new(channels, batch, h, w);
    if t.shape() != want {
        return Err(Error::Shape(format!("{what}: prediction is {} but target is {want}", t.shape())));
    }
    Ok(())
}

fn check_masks<T: Real>(what: &str, t: &Tensor<T>, masks: &[BinaryMask]) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Shape(format!("{what}: empty target batch")))?;
    for m in masks {
        check_plane(what, t, 1, masks.len(), m.height(), m.width())?;
    }
    check_plane(what, t, 1, masks.len(), first.height(), first.width())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce_term(p: f64, t: u8) -> f64 {
    let p = clamp_prob(p);
    if t == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy of a `1 x N x H x W` probability map.
pub fn bce_loss<T: Real>(prob: &Tensor<T>, masks: &[BinaryMask]) -> Result<f64> {
    check_masks("bce", prob, masks)?;
    let mut sum = 0.0;
    for (n, m) in masks.iter().enumerate() {
        sum += prob
            .plane(0, n)
            .iter()
            .zip(m.data())
            .map(|(&p, &t)| bce_term(p.as_f64(), t))
            .sum::<f64>();
    }
    Ok(sum / prob.numel() as f64)
}

/// Binary cross-entropy of `sigmoid(logits)` and its gradient with respect to
/// the logits. The gradient is zero where the clamp is active.
pub fn bce_logits_grad<T: Real>(logits: &Tensor<T>, masks: &[BinaryMask]) -> Result<(f64, Tensor<T>)> {
    check_masks("bce", logits, masks)?;
    let count = logits.numel() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut sum = 0.0;
    if kinks::active() {
        kinks::push(logits.data().iter().map(|&z| {
            let p = sigmoid(z.as_f64());
            p > PROB_EPS && p < 1.0 - PROB_EPS
        }));
    }
    for (n, m) in masks.iter().enumerate() {
        let g = grad.plane_mut(0, n);
        for ((gv, &z), &t) in g.iter_mut().zip(logits.plane(0, n)).zip(m.data()) {
            let p = sigmoid(z.as_f64());
            sum += bce_term(p, t);
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                *gv = T::lit((p - t as f64) / count);
            }
        }
    }
    Ok((sum / count, grad))
}

/// Mean absolute difference between the structure prediction and target.
pub fn structure_loss<T: Real>(pred: &Tensor<T>, targets: &[StructureTarget]) -> Result<f64> {
    Ok(structure_loss_grad(pred, targets)?.0)
}

/// L1 structure loss and its (sub)gradient with respect to the prediction.
pub fn structure_loss_grad<T: Real>(pred: &Tensor<T>, targets: &[StructureTarget]) -> Result<(f64, Tensor<T>)> {
    if targets.is_empty() {
        return Err(Error::Shape("structure: empty target batch".into()));
    }
    for t in targets {
        check_plane("structure", pred, 1, targets.len(), t.height(), t.width())?;
    }
    let count = pred.numel() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for (n, t) in targets.iter().enumerate() {
        if kinks::active() {
            kinks::push(pred.plane(0, n).iter().zip(t.values()).map(|(&p, &v)| p.as_f64() > v as f64));
        }
        let g = grad.plane_mut(0, n);
        for ((gv, &p), &v) in g.iter_mut().zip(pred.plane(0, n)).zip(t.values()) {
            let d = p.as_f64() - v as f64;
            sum += d.abs();
            if d != 0.0 {
                *gv = T::lit(d.signum() / count);
            }
        }
    }
    Ok((sum / count, grad))
}

/// Softmax cross-entropy over the four direction channels, averaged over
/// road pixels only. Zero when the batch contains no road pixel.
pub fn direction_loss<T: Real>(logits: &Tensor<T>, targets: &[DirectionMap]) -> Result<f64> {
    Ok(direction_loss_grad(logits, targets)?.0)
}

pub fn direction_loss_grad<T: Real>(logits: &Tensor<T>, targets: &[DirectionMap]) -> Result<(f64, Tensor<T>)> {
    if targets.is_empty() {
        return Err(Error::Shape("direction: empty target batch".into()));
    }
    for t in targets {
        check_plane("direction", logits, N_DIRECTIONS, targets.len(), t.height(), t.width())?;
    }
    let valid: usize = targets
        .iter()
        .map(|t| t.classes().iter().filter(|&&c| c < NON_ROAD).count())
        .sum();
    let mut grad = Tensor::zeros(logits.shape());
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let count = valid as f64;
    let mut sum = 0.0;
    let mut z = [0.0f64; N_DIRECTIONS];
    for (n, t) in targets.iter().enumerate() {
        for (px, &class) in t.classes().iter().enumerate() {
            if class == NON_ROAD {
                continue;
            }
            if class > NON_ROAD {
                return Err(Error::Data(format!("direction class {class} outside 0..=4")));
            }
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.plane(c, n)[px].as_f64();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            sum += lse - z[class as usize];
            for (c, &zc) in z.iter().enumerate() {
                let softmax = (zc - lse).exp();
                let onehot = if c == class as usize { 1.0 } else { 0.0 };
                grad.plane_mut(c, n)[px] = T::lit((softmax - onehot) / count);
            }
        }
    }
    Ok((sum / count, grad))
}

/// Weighted sum of every term the output provides; absent heads contribute 0.
pub fn hybrid_loss<T: Real>(output: &ModelOutput<T>, targets: &Targets, weights: &LossWeights) -> Result<LossReport> {
    Ok(hybrid_loss_grad(output, targets, weights)?.0)
}

/// Hybrid loss with the gradient of `total` with respect to every output.
pub fn hybrid_loss_grad<T: Real>(
    output: &ModelOutput<T>,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<(LossReport, OutputGrads<T>)> {
    weights.validate()?;
    let scale = |t: Tensor<T>, w: f64| t.map(|v| v * T::lit(w));

    let (l_seg, g_seg) = bce_logits_grad(&output.logits.seg_logits, &targets.masks)?;
    let (l_struct, g_struct) = match &output.logits.struct_pred {
        Some(p) => {
            let (l, g) = structure_loss_grad(p, &targets.structures)?;
            (l, Some(scale(g, weights.beta)))
        }
        None => (0.0, None),
    };
    let (l_direct, g_dir) = match &output.logits.dir_logits {
        Some(z) => {
            let (l, g) = direction_loss_grad(z, &targets.directions)?;
            (l, Some(scale(g, weights.gamma)))
        }
        None => (0.0, None),
    };
    let (l_ref, g_ref) = match &output.refined {
        Some(r) => {
            let (l, g) = bce_logits_grad(&r.refined_logits, &targets.masks)?;
            (l, Some(scale(g, weights.theta_w)))
        }
        None => (0.0, None),
    };
    let report = LossReport::from_terms(weights, l_seg, l_struct, l_direct, l_ref);
    let grads = OutputGrads {
        seg_logits: scale(g_seg, weights.alpha),
        dir_logits: g_dir,
        struct_pred: g_struct,
        refined_logits: g_ref,
    };
    Ok((report, grads))
}
