//! Head losses with analytic gradients, and their weighted total.
//!
//! Every loss returns its value together with the gradient with respect to the
//! prediction, element for element. Sums are accumulated sequentially so results
//! are bit-stable.

use serde::{Deserialize, Serialize};

use crate::decode::HeadOutput;
use crate::encode::TargetMaps;
use crate::error::{Error, Result};

/// Focal-loss inputs are clamped to `[EPS, 1 - EPS]`.
pub const FOCAL_EPS: f64 = 1e-6;

/// Residual at which the smooth-L1 loss turns linear.
pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zeros(n: usize) -> Self {
        LossGrad {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FocalVariant {
    /// Gaussian-target variant: positives are pixels equal to 1, negatives are
    /// down-weighted by `(1 - target)^beta`.
    PenaltyReduced { alpha: f64, beta: f64 },
    /// Binary-target original: every pixel below 1 is a plain negative.
    Binary { alpha: f64, gamma: f64 },
}

impl Default for FocalVariant {
    fn default() -> Self {
        FocalVariant::PenaltyReduced {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

pub fn focal_loss(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    focal_loss_with(pred, target, FocalVariant::default())
}

/// Pixel-wise focal loss normalized by `max(1, #pixels with target == 1)`.
pub fn focal_loss_with(pred: &[f64], target: &[f64], variant: FocalVariant) -> Result<LossGrad> {
    check_len(pred.len(), target.len())?;
    let num_pos = target.iter().filter(|&&t| t == 1.0).count();
    let norm = num_pos.max(1) as f64;
    let mut out = LossGrad::zeros(pred.len());
    let mut acc = 0.0;
    for (i, (&p_raw, &t)) in pred.iter().zip(target).enumerate() {
        let p = p_raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let active = p == p_raw;
        let (v, g) = match variant {
            FocalVariant::PenaltyReduced { alpha, beta } => {
                if t == 1.0 {
                    // -(1-p)^a log p
                    let q = 1.0 - p;
                    let v = -q.powf(alpha) * p.ln();
                    let g = alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p;
                    (v, g)
                } else {
                    // -(1-t)^b p^a log(1-p)
                    let wt = (1.0 - t).powf(beta);
                    let q = 1.0 - p;
                    let v = -wt * p.powf(alpha) * q.ln();
                    let g = -wt * (alpha * p.powf(alpha - 1.0) * q.ln() - p.powf(alpha) / q);
                    (v, g)
                }
            }
            FocalVariant::Binary { alpha, gamma } => {
                let q = 1.0 - p;
                if t == 1.0 {
                    let v = -alpha * q.powf(gamma) * p.ln();
                    let g = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
                    (v, g)
                } else {
                    let v = -(1.0 - alpha) * p.powf(gamma) * q.ln();
                    let g = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
                    (v, g)
                }
            }
        };
        acc += v;
        out.grad[i] = if active { g / norm } else { 0.0 };
    }
    out.value = acc / norm;
    Ok(out)
}

/// Splits `pred` into rows of `pred.len() / mask.len()` channels, one per object slot.
fn channels_for(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<usize> {
    check_len(pred.len(), target.len())?;
    if mask.is_empty() {
        check_len(0, pred.len())?;
        return Ok(1);
    }
    if pred.len() % mask.len() != 0 {
        return Err(Error::ShapeMismatch {
            expected: mask.len() * (pred.len() / mask.len()).max(1),
            actual: pred.len(),
        });
    }
    Ok(pred.len() / mask.len())
}

fn masked_mean(
    pred: &[f64],
    target: &[f64],
    mask: &[bool],
    f: impl Fn(f64) -> (f64, f64),
) -> Result<LossGrad> {
    let c = channels_for(pred, target, mask)?;
    let mut out = LossGrad::zeros(pred.len());
    let count = mask.iter().filter(|&&m| m).count() * c;
    if count == 0 {
        return Ok(out);
    }
    let n = count as f64;
    let mut acc = 0.0;
    for (slot, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for i in slot * c..(slot + 1) * c {
            let (v, g) = f(pred[i] - target[i]);
            acc += v;
            out.grad[i] = g / n;
        }
    }
    out.value = acc / n;
    Ok(out)
}

/// Mean absolute error over the masked-in entries.
///
/// `pred` and `target` hold `mask.len()` rows of equal width. The subgradient at a
/// zero residual is taken as 0.
pub fn l1_regression_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<LossGrad> {
    masked_mean(pred, target, mask, |r| (r.abs(), if r == 0.0 { 0.0 } else { r.signum() }))
}

/// Masked mean Huber loss with transition at [`HUBER_DELTA`].
pub fn smooth_l1_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<LossGrad> {
    masked_mean(pred, target, mask, |r| {
        if r.abs() < HUBER_DELTA {
            (0.5 * r * r / HUBER_DELTA, r / HUBER_DELTA)
        } else {
            (r.abs() - 0.5 * HUBER_DELTA, r.signum())
        }
    })
}

fn default_lambda() -> f64 {
    2.0
}

/// Per-head weights of the total loss. The heatmap term is unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_lambda")]
    pub offset: f64,
    #[serde(default = "default_lambda")]
    pub z: f64,
    #[serde(default = "default_lambda")]
    pub size: f64,
    #[serde(default = "default_lambda")]
    pub orientation: f64,
    #[serde(default = "default_lambda")]
    pub iou: f64,
    #[serde(default = "default_lambda")]
    pub keypoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::uniform(2.0)
    }
}

impl LossWeights {
    pub fn uniform(lambda: f64) -> Self {
        LossWeights {
            offset: lambda,
            z: lambda,
            size: lambda,
            orientation: lambda,
            iou: lambda,
            keypoint: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.offset, self.z, self.size, self.orientation, self.iou, self.keypoint];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub heat: f64,
    pub offset: f64,
    pub z: f64,
    pub size: f64,
    pub orientation: f64,
    pub iou: f64,
    pub keypoint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub total: f64,
}

pub fn total_loss(parts: LossParts, weights: &LossWeights) -> LossBreakdown {
    let total = parts.heat
        + weights.offset * parts.offset
        + weights.z * parts.z
        + weights.size * parts.size
        + weights.orientation * parts.orientation
        + weights.iou * parts.iou
        + weights.keypoint * parts.keypoint;
    LossBreakdown { parts, total }
}

/// Loss of a dense head output against encoded targets.
///
/// Regression heads are gathered at the target center pixels; only masked-in slots
/// contribute. `keypoint_pred` is the auxiliary keypoint heatmap, if the head has one.
pub fn head_losses(
    head: &HeadOutput,
    keypoint_pred: Option<&[f64]>,
    targets: &TargetMaps,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if (head.num_classes, head.height, head.width)
        != (targets.num_classes, targets.height, targets.width)
    {
        return Err(Error::invalid("head output and targets have different shapes"));
    }
    let hw = head.height * head.width;
    let n = targets.capacity;
    let mut pred = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut tgt = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for slot in 0..n {
        let idx = targets.indices[slot].min(hw - 1);
        let px = head.pixel(idx);
        pred[0].extend_from_slice(&px.offset);
        pred[1].push(px.z);
        pred[2].extend_from_slice(&px.size);
        pred[3].extend_from_slice(&px.rot);
        pred[4].push(px.iou);
        tgt[0].extend_from_slice(&targets.offset[slot]);
        tgt[1].push(targets.z[slot]);
        tgt[2].extend_from_slice(&targets.size[slot]);
        tgt[3].extend_from_slice(&targets.orientation[slot]);
        tgt[4].push(targets.iou_target[slot]);
    }
    let mask = &targets.mask;
    let parts = LossParts {
        heat: focal_loss(&head.heatmap, &targets.heatmap)?.value,
        offset: l1_regression_loss(&pred[0], &tgt[0], mask)?.value,
        z: l1_regression_loss(&pred[1], &tgt[1], mask)?.value,
        size: l1_regression_loss(&pred[2], &tgt[2], mask)?.value,
        orientation: l1_regression_loss(&pred[3], &tgt[3], mask)?.value,
        iou: smooth_l1_loss(&pred[4], &tgt[4], mask)?.value,
        keypoint: match keypoint_pred {
            Some(k) => focal_loss(k, &targets.keypoint_map)?.value,
            None => 0.0,
        },
    };
    Ok(total_loss(parts, weights))
}
