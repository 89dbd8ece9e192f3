//! Evaluation: mask/box average precision (COCO-style, 101-point) and the
//! δ-threshold height accuracies.
//!
//! Undefined quantities (no ground-truth instances, no building pixels) are
//! reported as `None`, never as a perfect score.

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, HeightMap, InstanceSet};
use crate::error::{LightError, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Predictions per image that take part in matching.
pub const MAX_DETS: usize = 100;

/// `|A ∩ B| / |A ∪ B|`; two empty masks give 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(LightError::shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        log::warn!("IoU of two empty masks taken as 0");
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// What overlap measure drives matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    Mask,
    Box,
}

/// Pairwise IoU matrix `[pred][gt]` for one image (predictions truncated to [`MAX_DETS`]).
pub fn iou_matrix(pred: &InstanceSet, gt: &InstanceSet, kind: IouKind) -> Result<Vec<Vec<f64>>> {
    pred.instances
        .iter()
        .take(MAX_DETS)
        .map(|p| {
            gt.instances
                .iter()
                .map(|g| match kind {
                    IouKind::Mask => mask_iou(&p.mask, &g.mask),
                    IouKind::Box => Ok(p.bbox.iou(&g.bbox)),
                })
                .collect()
        })
        .collect()
}

/// Precomputed overlaps for a whole split, reusable across thresholds.
pub struct MatchTable {
    /// Per image: predictions in descending score order as `(score, ious)`.
    images: Vec<Vec<(f64, Vec<f64>)>>,
    n_gt: usize,
}

impl MatchTable {
    pub fn new(preds: &[InstanceSet], gts: &[InstanceSet], kind: IouKind) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(LightError::shape(format!("{} prediction sets for {} images", preds.len(), gts.len())));
        }
        let mut images = Vec::with_capacity(preds.len());
        for (p, g) in preds.iter().zip(gts) {
            let mut sorted = p.clone();
            sorted.sort_by_score();
            let ious = iou_matrix(&sorted, g, kind)?;
            images.push(sorted.instances.iter().map(|i| i.score).zip(ious).collect());
        }
        Ok(Self { images, n_gt: gts.iter().map(|g| g.len()).sum() })
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    /// 101-point interpolated AP at one IoU threshold; `None` without ground truth.
    pub fn average_precision(&self, iou_thresh: f64) -> Option<f64> {
        if self.n_gt == 0 {
            return None;
        }
        // (score, image, rank) → true positive?
        let mut flags: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (img, dets) in self.images.iter().enumerate() {
            let n_g = dets.first().map(|d| d.1.len()).unwrap_or(0);
            let mut taken = vec![false; n_g];
            for (rank, (score, ious)) in dets.iter().enumerate() {
                let mut best: Option<usize> = None;
                let mut best_iou = iou_thresh;
                for (gi, &iou) in ious.iter().enumerate() {
                    if !taken[gi] && iou >= best_iou && best.is_none_or(|_| iou > best_iou) {
                        best = Some(gi);
                        best_iou = iou;
                    }
                }
                if let Some(gi) = best {
                    taken[gi] = true;
                }
                flags.push((*score, img, rank, best.is_some()));
            }
        }
        flags.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(flags.len());
        let mut precision = Vec::with_capacity(flags.len());
        for f in &flags {
            if f.3 {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / self.n_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let rt = r as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < rt);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        Some(sum / 101.0)
    }
}

/// AP (fraction in `[0, 1]`) at one threshold.
pub fn average_precision(preds: &[InstanceSet], gts: &[InstanceSet], iou_thresh: f64, kind: IouKind) -> Result<Option<f64>> {
    Ok(MatchTable::new(preds, gts, kind)?.average_precision(iou_thresh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Percent, mean over 0.50:0.05:0.95.
    pub map: Option<f64>,
    /// Percent, at IoU 0.50.
    pub ap50: Option<f64>,
    /// `(threshold, AP percent)`.
    pub per_threshold: Vec<(f64, Option<f64>)>,
}

/// mAP and AP50 in percent.
pub fn map_metric(preds: &[InstanceSet], gts: &[InstanceSet], kind: IouKind) -> Result<ApSummary> {
    let table = MatchTable::new(preds, gts, kind)?;
    let per_threshold: Vec<(f64, Option<f64>)> =
        coco_thresholds().into_iter().map(|t| (t, table.average_precision(t).map(|v| 100.0 * v))).collect();
    let map = if table.n_gt() == 0 {
        None
    } else {
        Some(per_threshold.iter().map(|(_, v)| v.unwrap_or(0.0)).sum::<f64>() / per_threshold.len() as f64)
    };
    Ok(ApSummary { map, ap50: per_threshold[0].1, per_threshold })
}

/// Ground-truth heights at or below this are excluded from δ accuracy.
pub const DELTA_MIN_GT_M: f32 = 1.0;
/// Predictions are clamped below to this before taking ratios.
pub const DELTA_PRED_FLOOR_M: f32 = 0.1;

/// Pooled δ₁/δ₂/δ₃ counts over any number of height maps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeltaCounter {
    pub evaluated: u64,
    pub within: [u64; 3],
}

impl DeltaCounter {
    pub fn add(&mut self, pred: &HeightMap, gt: &HeightMap) -> Result<()> {
        if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
            return Err(LightError::shape(format!(
                "height maps differ: {}x{} vs {}x{}",
                pred.rows, pred.cols, gt.rows, gt.cols
            )));
        }
        let th = [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)];
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            if g <= DELTA_MIN_GT_M {
                continue;
            }
            let p = p.max(DELTA_PRED_FLOOR_M) as f64;
            let g = g as f64;
            let ratio = (p / g).max(g / p);
            self.evaluated += 1;
            for k in 0..3 {
                if ratio < th[k] {
                    self.within[k] += 1;
                }
            }
        }
        Ok(())
    }

    /// δ_k in percent, `k ∈ {1, 2, 3}`.
    pub fn percent(&self, k: usize) -> Option<f64> {
        assert!((1..=3).contains(&k), "δ index must be 1, 2 or 3");
        (self.evaluated > 0).then(|| 100.0 * self.within[k - 1] as f64 / self.evaluated as f64)
    }
}

/// δ_k accuracy of a single prediction, in percent.
pub fn delta_accuracy(pred: &HeightMap, gt: &HeightMap, k: usize) -> Result<Option<f64>> {
    let mut c = DeltaCounter::default();
    c.add(pred, gt)?;
    Ok(c.percent(k))
}

/// Every column of the evaluation table; `None` marks a not-applicable cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
    /// Mask AP per IoU threshold, percent.
    pub per_threshold_ap: Vec<(f64, Option<f64>)>,
    pub box_map: Option<f64>,
    pub box_ap50: Option<f64>,
    pub n_images: usize,
    pub n_gt: usize,
}

impl MetricsReport {
    /// Scores predictions against ground truth. Either side may be skipped
    /// (`None`) to leave its columns not-applicable.
    pub fn compute(
        instances: Option<(&[InstanceSet], &[InstanceSet])>,
        heights: Option<(&[HeightMap], &[HeightMap])>,
        n_images: usize,
    ) -> Result<Self> {
        let mut r = MetricsReport {
            map: None,
            ap50: None,
            delta1: None,
            delta2: None,
            delta3: None,
            per_threshold_ap: Vec::new(),
            box_map: None,
            box_ap50: None,
            n_images,
            n_gt: 0,
        };
        if let Some((pred, gt)) = instances {
            let mask = map_metric(pred, gt, IouKind::Mask)?;
            let boxes = map_metric(pred, gt, IouKind::Box)?;
            r.map = mask.map;
            r.ap50 = mask.ap50;
            r.per_threshold_ap = mask.per_threshold;
            r.box_map = boxes.map;
            r.box_ap50 = boxes.ap50;
            r.n_gt = gt.iter().map(|g| g.len()).sum();
        }
        if let Some((pred, gt)) = heights {
            if pred.len() != gt.len() {
                return Err(LightError::shape("height prediction and ground-truth counts differ"));
            }
            let mut c = DeltaCounter::default();
            for (p, g) in pred.iter().zip(gt) {
                c.add(p, g)?;
            }
            r.delta1 = c.percent(1);
            r.delta2 = c.percent(2);
            r.delta3 = c.percent(3);
        }
        Ok(r)
    }
}
