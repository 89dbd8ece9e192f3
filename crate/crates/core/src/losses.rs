//! Training objective: weighted sum of detection, mask and height losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LightError, Result};
use crate::tensor::{Scalar, Tensor};

/// Smooth-L1 transition point for the proposal box loss.
pub const RPN_BOX_BETA: f64 = 1.0 / 9.0;
pub const ROI_BOX_BETA: f64 = 1.0;
pub const HEIGHT_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub det: f64,
    pub mask: f64,
    pub height: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { det: 1.0, mask: 1.0, height: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss_weights.det", self.det), ("loss_weights.mask", self.mask), ("loss_weights.height", self.height)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LightError::config(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which pixels the height loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightLossMask {
    #[default]
    AllPixels,
    BuildingsOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub det: f64,
    pub mask: f64,
    pub height: f64,
    pub total: f64,
}

/// One prediction tensor with its targets and a 0/1 selection of the entries that count.
#[derive(Clone, Copy, Debug)]
pub struct Term<'a, F: Scalar> {
    pub pred: Var,
    pub target: &'a Tensor<F>,
    pub mask: &'a Tensor<F>,
}

fn constant<F: Scalar>(g: &mut Graph<F>, v: f64) -> Var {
    g.input(Tensor::scalar(F::of(v)))
}

fn normalized_sum<F: Scalar>(g: &mut Graph<F>, parts: Vec<Var>, norm: usize) -> Result<Var> {
    if parts.is_empty() {
        return Ok(constant(g, 0.0));
    }
    let s = g.add_n(&parts)?;
    Ok(g.scale(s, F::of(1.0 / norm.max(1) as f64)))
}

/// `Σ mask · BCE(σ(pred), target) / norm` over all terms.
pub fn bce_loss<F: Scalar>(g: &mut Graph<F>, terms: &[Term<F>], norm: usize) -> Result<Var> {
    let parts = terms.iter().map(|t| g.bce_with_logits(t.pred, t.target, t.mask)).collect::<Result<Vec<_>>>()?;
    normalized_sum(g, parts, norm)
}

/// `Σ mask · smoothL1_β(pred − target) / norm` over all terms.
pub fn smooth_l1_loss<F: Scalar>(g: &mut Graph<F>, terms: &[Term<F>], beta: f64, norm: usize) -> Result<Var> {
    let parts = terms.iter().map(|t| g.smooth_l1(t.pred, t.target, t.mask, F::of(beta))).collect::<Result<Vec<_>>>()?;
    normalized_sum(g, parts, norm)
}

/// Proposal and region terms of the detection loss. Classification masks
/// select sampled entries, box masks select positive entries; both are
/// normalized by the number of sampled entries.
pub struct DetectionInputs<'a, F: Scalar> {
    pub rpn_objectness: Vec<Term<'a, F>>,
    pub rpn_boxes: Vec<Term<'a, F>>,
    pub rpn_sampled: usize,
    pub roi_class: Option<Term<'a, F>>,
    pub roi_boxes: Option<Term<'a, F>>,
    pub roi_sampled: usize,
}

/// Individual detection terms as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub roi_class: Var,
    pub roi_box: Var,
    pub total: Var,
}

pub fn detection_loss<F: Scalar>(g: &mut Graph<F>, inputs: &DetectionInputs<F>) -> Result<DetectionLoss> {
    let rpn_objectness = bce_loss(g, &inputs.rpn_objectness, inputs.rpn_sampled)?;
    let rpn_box = smooth_l1_loss(g, &inputs.rpn_boxes, RPN_BOX_BETA, inputs.rpn_sampled)?;
    let roi_class = bce_loss(g, inputs.roi_class.as_slice(), inputs.roi_sampled)?;
    let roi_box = smooth_l1_loss(g, inputs.roi_boxes.as_slice(), ROI_BOX_BETA, inputs.roi_sampled)?;
    let total = g.add_n(&[rpn_objectness, rpn_box, roi_class, roi_box])?;
    Ok(DetectionLoss { rpn_objectness, rpn_box, roi_class, roi_box, total })
}

/// Mean per-pixel BCE of `(R, 1, M, M)` logits against binary targets; 0 when `R = 0`.
pub fn mask_loss<F: Scalar>(g: &mut Graph<F>, logits: Option<Var>, targets: &Tensor<F>) -> Result<Var> {
    match logits {
        Some(l) if !targets.is_empty() => {
            let ones = Tensor::full(targets.shape(), F::one());
            let s = g.bce_with_logits(l, targets, &ones)?;
            Ok(g.scale(s, F::of(1.0 / targets.len() as f64)))
        }
        _ => Ok(constant(g, 0.0)),
    }
}

/// Mean smooth-L1 over the selected pixels (all pixels when `mask` is `None`).
pub fn height_loss<F: Scalar>(g: &mut Graph<F>, pred: Var, target: &Tensor<F>, beta: f64, mask: Option<&Tensor<F>>) -> Result<Var> {
    if g.value(pred).shape() != target.shape() {
        return Err(LightError::shape(format!(
            "height prediction {:?} vs target {:?}",
            g.value(pred).shape(),
            target.shape()
        )));
    }
    let all = Tensor::full(target.shape(), F::one());
    let w = mask.unwrap_or(&all);
    let count = w.data().iter().filter(|&&v| v != F::zero()).count();
    let s = g.smooth_l1(pred, target, w, F::of(beta))?;
    Ok(g.scale(s, F::of(1.0 / count.max(1) as f64)))
}

/// `λ_det·det + λ_mask·mask + λ_height·height`; absent parts count as 0.
/// A non-finite part aborts with an error naming it.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    det: Option<Var>,
    mask: Option<Var>,
    height: Option<Var>,
    weights: &LossWeights,
    step: usize,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for (name, part, lambda, slot) in [
        ("det", det, weights.det, &mut report.det),
        ("mask", mask, weights.mask, &mut report.mask),
        ("height", height, weights.height, &mut report.height),
    ] {
        let Some(v) = part else { continue };
        let value = g.value(v).data()[0].as_f64();
        if !value.is_finite() {
            return Err(LightError::NonFinite { part: name.to_string(), step, value });
        }
        *slot = value;
        terms.push(g.scale(v, F::of(lambda)));
    }
    report.total = weights.det * report.det + weights.mask * report.mask + weights.height * report.height;
    let total = if terms.is_empty() { constant(g, 0.0) } else { g.add_n(&terms)? };
    Ok((total, report))
}
