//! Two-stage instance segmentation over the feature pyramid: region proposals,
//! RoIAlign pooling, box classification/regression and per-instance masks.

mod anchors;
mod boxes;
mod heads;
mod targets;

pub use anchors::{generate_anchors, Anchor};
pub use boxes::{decode_box, encode_box, nms, BoxCoder, DELTA_CLAMP};
pub use heads::{BoxHead, MaskHead, RpnHead};
pub use targets::{sample_balanced, Match, Matcher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::data::{BBox, BinaryMask, Instance, InstanceSet};
use crate::error::{LightError, Result};
use crate::feature_extractor::STRIDES;
use crate::losses::{detection_loss, mask_loss, DetectionInputs, DetectionLoss, Term};
use crate::nn::ParamStore;
use crate::tensor::kernels::{roi_align_forward, RoiRef, SamplingRatio};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceConfig {
    /// Anchor side per pyramid level, in input pixels.
    pub anchor_scales: Vec<f64>,
    /// Anchor height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub pre_nms: usize,
    pub post_nms: usize,
    pub rpn_nms_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
    pub roi_negative_iou: f64,
    /// Upper bound on positive RoIs per image that train the mask head.
    pub max_mask_rois: usize,
    pub box_pool: usize,
    pub mask_pool: usize,
    pub sampling: SamplingRatio,
    pub fc_dim: usize,
    pub mask_convs: usize,
    pub roi_box_weights: [f64; 4],
    pub score_thresh: f64,
    pub det_nms_iou: f64,
    pub max_det: usize,
    /// Canonical level index for a 224-pixel box.
    pub canonical_level: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            anchor_scales: vec![32.0, 64.0, 128.0, 256.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pre_nms: 1000,
            post_nms: 256,
            rpn_nms_iou: 0.7,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            roi_batch: 128,
            roi_positive_fraction: 0.25,
            roi_positive_iou: 0.5,
            roi_negative_iou: 0.4,
            max_mask_rois: 64,
            box_pool: 7,
            mask_pool: 14,
            sampling: SamplingRatio::Fixed(2),
            fc_dim: 1024,
            mask_convs: 4,
            roi_box_weights: [10.0, 10.0, 5.0, 5.0],
            score_thresh: 0.05,
            det_nms_iou: 0.5,
            max_det: 100,
            canonical_level: 2,
        }
    }
}

impl InstanceConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        let err = |f: &str, m: &str| Err(LightError::config(format!("instance.{f}"), m));
        if self.anchor_scales.len() != levels || self.anchor_scales.iter().any(|&s| !(s > 0.0)) {
            return err("anchor_scales", "need one positive scale per pyramid level");
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|&r| !(r > 0.0)) {
            return err("anchor_ratios", "need at least one positive ratio");
        }
        for (f, v) in [
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("det_nms_iou", self.det_nms_iou),
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("roi_positive_fraction", self.roi_positive_fraction),
            ("score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(f, "must lie in [0, 1]");
            }
        }
        if self.rpn_negative_iou > self.rpn_positive_iou {
            return err("rpn_negative_iou", "exceeds rpn_positive_iou");
        }
        if self.roi_negative_iou > self.roi_positive_iou {
            return err("roi_negative_iou", "exceeds roi_positive_iou");
        }
        for (f, v) in [
            ("pre_nms", self.pre_nms),
            ("post_nms", self.post_nms),
            ("rpn_batch", self.rpn_batch),
            ("roi_batch", self.roi_batch),
            ("box_pool", self.box_pool),
            ("mask_pool", self.mask_pool),
            ("fc_dim", self.fc_dim),
            ("max_det", self.max_det),
        ] {
            if v == 0 {
                return err(f, "must be positive");
            }
        }
        if self.roi_box_weights.iter().any(|&w| !(w > 0.0)) {
            return err("roi_box_weights", "must be positive");
        }
        Ok(())
    }

    /// Side of the predicted mask grid.
    pub fn mask_size(&self) -> usize {
        2 * self.mask_pool
    }
}

/// Pyramid level for a box: `floor(k0 + log2(√(wh) / 224))`, clamped to `[0, levels)`.
pub fn assign_level(b: &BBox, canonical_level: usize, levels: usize) -> usize {
    let s = b.area().sqrt().max(1e-6);
    let k = (canonical_level as f64 + (s / 224.0).log2() + 1e-6).floor();
    k.clamp(0.0, (levels - 1) as f64) as usize
}

fn roi_ref(batch: usize, b: &BBox, canonical_level: usize, levels: usize) -> RoiRef {
    let level = assign_level(b, canonical_level, levels);
    let s = 1.0 / STRIDES[level] as f64;
    RoiRef { batch, level, x1: b.x1 * s, y1: b.y1 * s, x2: b.x2 * s, y2: b.y2 * s }
}

/// A scored box with optional mask probabilities on the `M×M` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDetection {
    pub bbox: BBox,
    pub score: f64,
    pub mask_probs: Vec<f32>,
}

/// Thresholds, suppresses and truncates detections; returns kept indices in score order.
pub fn select_detections(boxes: &[BBox], scores: &[f64], score_thresh: f64, nms_iou: f64, max_det: usize) -> Vec<usize> {
    let cand: Vec<usize> = (0..boxes.len()).filter(|&i| scores[i] >= score_thresh).collect();
    let b: Vec<BBox> = cand.iter().map(|&i| boxes[i]).collect();
    let s: Vec<f64> = cand.iter().map(|&i| scores[i]).collect();
    let mut keep: Vec<usize> = nms(&b, &s, nms_iou).into_iter().map(|k| cand[k]).collect();
    keep.truncate(max_det);
    keep
}

/// Resamples `M×M` mask probabilities into the box and binarizes at 0.5.
/// A pixel belongs to the box when its center lies inside it.
pub fn paste_mask(probs: &[f32], m: usize, b: &BBox, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height);
    let (bw, bh) = (b.width(), b.height());
    if bw <= 0.0 || bh <= 0.0 || probs.len() != m * m {
        return mask;
    }
    let xs = (b.x1 - 0.5).ceil().max(0.0) as usize;
    let ys = (b.y1 - 0.5).ceil().max(0.0) as usize;
    let max = m as f64 - 1.0;
    for y in ys..height {
        let cy = y as f64 + 0.5;
        if cy >= b.y2 {
            break;
        }
        if cy < b.y1 {
            continue;
        }
        let v = ((cy - b.y1) / bh * m as f64 - 0.5).clamp(0.0, max);
        let (v0, fv) = (v.floor() as usize, v - v.floor());
        let v1 = (v0 + 1).min(m - 1);
        for x in xs..width {
            let cx = x as f64 + 0.5;
            if cx >= b.x2 {
                break;
            }
            if cx < b.x1 {
                continue;
            }
            let u = ((cx - b.x1) / bw * m as f64 - 0.5).clamp(0.0, max);
            let (u0, fu) = (u.floor() as usize, u - u.floor());
            let u1 = (u0 + 1).min(m - 1);
            let p = |r: usize, c: usize| probs[r * m + c] as f64;
            let val = (1.0 - fv) * ((1.0 - fu) * p(v0, u0) + fu * p(v0, u1)) + fv * ((1.0 - fu) * p(v1, u0) + fu * p(v1, u1));
            if val >= 0.5 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Threshold, NMS and top-k over raw detections, then masks pasted at image resolution.
pub fn postprocess(dets: &[RawDetection], mask_size: usize, score_thresh: f64, nms_iou: f64, max_det: usize, width: usize, height: usize) -> InstanceSet {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let keep = select_detections(&boxes, &scores, score_thresh, nms_iou, max_det);
    let instances = keep
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            Instance { bbox: d.bbox, mask: paste_mask(&d.mask_probs, mask_size, &d.bbox, width, height), score: d.score, height_m: None }
        })
        .collect();
    InstanceSet { width, height, instances }
}

/// Objectness logits and deltas of one batch, per level.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub objectness: Vec<Var>,
    pub deltas: Vec<Var>,
    pub level_hw: Vec<(usize, usize)>,
}

/// Scored proposals of one image, best first.
#[derive(Clone, Debug, Default)]
pub struct Proposals {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

/// Counters from one training forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InstanceStats {
    pub rpn_positives: usize,
    pub roi_positives: usize,
    pub mask_rois: usize,
}

pub struct InstanceLosses {
    pub det: DetectionLoss,
    pub mask: Var,
    pub stats: InstanceStats,
}

#[derive(Clone, Debug)]
pub struct InstanceBranch {
    pub cfg: InstanceConfig,
    pub rpn: RpnHead,
    pub box_head: BoxHead,
    pub mask_head: MaskHead,
    pub levels: usize,
}

impl InstanceBranch {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &InstanceConfig, levels: usize, d: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(levels)?;
        Ok(Self {
            rpn: RpnHead::new(store, d, cfg.anchor_ratios.len(), rng),
            box_head: BoxHead::new(store, d, cfg.box_pool, cfg.fc_dim, rng),
            mask_head: MaskHead::new(store, d, cfg.mask_convs, rng),
            cfg: cfg.clone(),
            levels,
        })
    }

    pub fn rpn_forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, levels: &[Var]) -> Result<RpnOutput> {
        let level_hw = levels
            .iter()
            .map(|&l| g.value(l).dims4().map(|(_, _, h, w)| (h, w)))
            .collect::<Result<Vec<_>>>()?;
        let (objectness, deltas) = self.rpn.forward(g, store, levels)?;
        Ok(RpnOutput { objectness, deltas, level_hw })
    }

    pub fn anchors(&self, level_hw: &[(usize, usize)]) -> Vec<Vec<Anchor>> {
        generate_anchors(level_hw, &STRIDES[..level_hw.len()], &self.cfg.anchor_scales, &self.cfg.anchor_ratios)
    }

    /// Per-anchor objectness logits and deltas of image `n`, flattened over levels in anchor order.
    fn flat_rpn<F: Scalar>(&self, g: &Graph<F>, out: &RpnOutput, n: usize) -> (Vec<f64>, Vec<[f64; 4]>) {
        let a = self.rpn.anchors_per_cell;
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        for (l, &(h, w)) in out.level_hw.iter().enumerate() {
            let (o, d) = (g.value(out.objectness[l]).sample(n), g.value(out.deltas[l]).sample(n));
            let hw = h * w;
            for p in 0..hw {
                for ai in 0..a {
                    logits.push(o[ai * hw + p].as_f64());
                    deltas.push(std::array::from_fn(|k| d[(4 * ai + k) * hw + p].as_f64()));
                }
            }
        }
        (logits, deltas)
    }

    /// Top-`pre_nms` decoded anchors, clipped, boxes under one pixel removed,
    /// NMS at `rpn_nms_iou`, top `post_nms` kept.
    pub fn select_proposals(&self, logits: &[f64], deltas: &[[f64; 4]], anchors: &[Anchor], width: usize, height: usize) -> Proposals {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(self.cfg.pre_nms);
        let mut boxes = Vec::with_capacity(order.len());
        let mut scores = Vec::with_capacity(order.len());
        for i in order {
            let b = decode_box(deltas[i], &anchors[i].bbox()).clip(width, height);
            if b.width() >= 1.0 && b.height() >= 1.0 {
                boxes.push(b);
                scores.push(sigmoid(logits[i]));
            }
        }
        let mut keep = nms(&boxes, &scores, self.cfg.rpn_nms_iou);
        keep.truncate(self.cfg.post_nms);
        Proposals { boxes: keep.iter().map(|&k| boxes[k]).collect(), scores: keep.iter().map(|&k| scores[k]).collect() }
    }

    pub fn proposals<F: Scalar>(&self, g: &Graph<F>, out: &RpnOutput, n_images: usize, width: usize, height: usize) -> Vec<Proposals> {
        let anchors: Vec<Anchor> = self.anchors(&out.level_hw).into_iter().flatten().collect();
        (0..n_images)
            .map(|n| {
                let (l, d) = self.flat_rpn(g, out, n);
                self.select_proposals(&l, &d, &anchors, width, height)
            })
            .collect()
    }

    fn rois(&self, boxes: &[(usize, BBox)]) -> Vec<RoiRef> {
        boxes.iter().map(|(n, b)| roi_ref(*n, b, self.cfg.canonical_level, self.levels)).collect()
    }

    /// Class logits `(R, 1)` and deltas `(R, 4)` for `(image, box)` pairs.
    pub fn box_forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, levels: &[Var], boxes: &[(usize, BBox)]) -> Result<(Var, Var)> {
        let rois = self.rois(boxes);
        let pooled = g.roi_align(levels, &rois, self.cfg.box_pool, self.cfg.sampling)?;
        self.box_head.forward(g, store, pooled)
    }

    /// Mask logits `(R, 1, M, M)` for `(image, box)` pairs.
    pub fn mask_forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, levels: &[Var], boxes: &[(usize, BBox)]) -> Result<Var> {
        let rois = self.rois(boxes);
        let pooled = g.roi_align(levels, &rois, self.cfg.mask_pool, self.cfg.sampling)?;
        self.mask_head.forward(g, store, pooled)
    }

    /// Detection and mask losses for a batch with ground truth `gts`.
    pub fn losses<F: Scalar, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        levels: &[Var],
        gts: &[&InstanceSet],
        rng: &mut R,
    ) -> Result<InstanceLosses> {
        let n_img = gts.len();
        let (width, height) = gts.first().map(|s| (s.width, s.height)).ok_or_else(|| LightError::shape("empty batch"))?;
        let rpn = self.rpn_forward(g, store, levels)?;
        let anchors: Vec<Anchor> = self.anchors(&rpn.level_hw).into_iter().flatten().collect();
        let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox()).collect();
        let a = self.rpn.anchors_per_cell;
        let mut stats = InstanceStats::default();

        // Proposal-stage targets laid out like the head outputs.
        let mut obj_t: Vec<Tensor<F>> = rpn.objectness.iter().map(|&v| Tensor::zeros(g.value(v).shape())).collect();
        let mut obj_m = obj_t.clone();
        let mut box_t: Vec<Tensor<F>> = rpn.deltas.iter().map(|&v| Tensor::zeros(g.value(v).shape())).collect();
        let mut box_m = box_t.clone();
        let mut offsets = vec![0];
        for &(h, w) in &rpn.level_hw {
            offsets.push(offsets.last().expect("non-empty") + h * w * a);
        }
        let locate = |i: usize| {
            let l = offsets.partition_point(|&o| o <= i) - 1;
            let r = i - offsets[l];
            (l, r / a, r % a)
        };
        let rpn_matcher = Matcher {
            positive_iou: self.cfg.rpn_positive_iou,
            negative_iou: self.cfg.rpn_negative_iou,
            allow_low_quality: true,
        };
        let mut rpn_sampled = 0;
        for (n, gt) in gts.iter().enumerate() {
            let gt_boxes: Vec<BBox> = gt.instances.iter().map(|i| i.bbox).collect();
            let matches = rpn_matcher.assign(&anchor_boxes, &gt_boxes);
            let (pos, neg) = sample_balanced(&matches, self.cfg.rpn_batch, self.cfg.rpn_positive_fraction, rng);
            rpn_sampled += pos.len() + neg.len();
            stats.rpn_positives += pos.len();
            for &i in &neg {
                let (l, p, ai) = locate(i);
                let hw = rpn.level_hw[l].0 * rpn.level_hw[l].1;
                let per = obj_t[l].len() / n_img;
                obj_m[l].data_mut()[n * per + ai * hw + p] = F::one();
            }
            for &i in &pos {
                let Match::Positive(gi) = matches[i] else { unreachable!("sampled positive") };
                let (l, p, ai) = locate(i);
                let hw = rpn.level_hw[l].0 * rpn.level_hw[l].1;
                let per = obj_t[l].len() / n_img;
                obj_m[l].data_mut()[n * per + ai * hw + p] = F::one();
                obj_t[l].data_mut()[n * per + ai * hw + p] = F::one();
                let t = encode_box(&gt_boxes[gi], &anchor_boxes[i]);
                let per4 = box_t[l].len() / n_img;
                for (k, &tk) in t.iter().enumerate() {
                    let idx = n * per4 + (4 * ai + k) * hw + p;
                    box_t[l].data_mut()[idx] = F::of(tk);
                    box_m[l].data_mut()[idx] = F::one();
                }
            }
        }

        // Region-stage sampling over proposals plus ground-truth boxes.
        let props = self.proposals(g, &rpn, n_img, width, height);
        let roi_matcher = Matcher {
            positive_iou: self.cfg.roi_positive_iou,
            negative_iou: self.cfg.roi_negative_iou,
            allow_low_quality: false,
        };
        let coder = BoxCoder::new(self.cfg.roi_box_weights);
        let mut roi_boxes: Vec<(usize, BBox)> = Vec::new();
        let mut roi_labels: Vec<F> = Vec::new();
        let mut roi_targets: Vec<[f64; 4]> = Vec::new();
        let mut mask_rois: Vec<(usize, BBox)> = Vec::new();
        let mut mask_targets: Vec<F> = Vec::new();
        let m = self.cfg.mask_size();
        for (n, gt) in gts.iter().enumerate() {
            let gt_boxes: Vec<BBox> = gt.instances.iter().map(|i| i.bbox).collect();
            let mut cands = props[n].boxes.clone();
            cands.extend_from_slice(&gt_boxes);
            let matches = roi_matcher.assign(&cands, &gt_boxes);
            let (pos, neg) = sample_balanced(&matches, self.cfg.roi_batch, self.cfg.roi_positive_fraction, rng);
            stats.roi_positives += pos.len();
            for &i in &pos {
                let Match::Positive(gi) = matches[i] else { unreachable!("sampled positive") };
                roi_boxes.push((n, cands[i]));
                roi_labels.push(F::one());
                roi_targets.push(coder.encode(&gt_boxes[gi], &cands[i]));
            }
            for &i in &neg {
                roi_boxes.push((n, cands[i]));
                roi_labels.push(F::zero());
                roi_targets.push([0.0; 4]);
            }
            let mask_pos: Vec<usize> = pos.iter().copied().take(self.cfg.max_mask_rois).collect();
            if !mask_pos.is_empty() {
                let gm = gt_mask_tensor::<f64>(gt);
                let rois: Vec<RoiRef> = mask_pos
                    .iter()
                    .map(|&i| {
                        let Match::Positive(gi) = matches[i] else { unreachable!("sampled positive") };
                        let b = cands[i];
                        RoiRef { batch: gi, level: 0, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
                    })
                    .collect();
                let crop = roi_align_forward(&[&gm], &rois, m, SamplingRatio::Adaptive)?;
                mask_targets.extend(crop.data().iter().map(|&v| if v >= 0.5 { F::one() } else { F::zero() }));
                mask_rois.extend(mask_pos.iter().map(|&i| (n, cands[i])));
            }
        }
        stats.mask_rois = mask_rois.len();

        let r = roi_boxes.len();
        let (cls_t, cls_m, reg_t, reg_m);
        let roi_terms = if r > 0 {
            let (cls, reg) = self.box_forward(g, store, levels, &roi_boxes)?;
            cls_t = Tensor::from_vec(&[r, 1], roi_labels.clone())?;
            cls_m = Tensor::full(&[r, 1], F::one());
            reg_t = Tensor::from_vec(&[r, 4], roi_targets.iter().flat_map(|t| t.map(F::of)).collect())?;
            reg_m = Tensor::from_fn(&[r, 4], |i| roi_labels[i / 4]);
            Some((Term { pred: cls, target: &cls_t, mask: &cls_m }, Term { pred: reg, target: &reg_t, mask: &reg_m }))
        } else {
            None
        };
        let inputs = DetectionInputs {
            rpn_objectness: (0..self.levels).map(|l| Term { pred: rpn.objectness[l], target: &obj_t[l], mask: &obj_m[l] }).collect(),
            rpn_boxes: (0..self.levels).map(|l| Term { pred: rpn.deltas[l], target: &box_t[l], mask: &box_m[l] }).collect(),
            rpn_sampled,
            roi_class: roi_terms.map(|t| t.0),
            roi_boxes: roi_terms.map(|t| t.1),
            roi_sampled: r,
        };
        let det = detection_loss(g, &inputs)?;
        let mask = if mask_rois.is_empty() {
            mask_loss(g, None, &Tensor::zeros(&[0]))?
        } else {
            let logits = self.mask_forward(g, store, levels, &mask_rois)?;
            let t = Tensor::from_vec(&[mask_rois.len(), 1, m, m], mask_targets)?;
            mask_loss(g, Some(logits), &t)?
        };
        Ok(InstanceLosses { det, mask, stats })
    }

    /// Final instances per image.
    pub fn predict<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, levels: &[Var], n_images: usize, width: usize, height: usize) -> Result<Vec<InstanceSet>> {
        let rpn = self.rpn_forward(g, store, levels)?;
        let props = self.proposals(g, &rpn, n_images, width, height);
        let all: Vec<(usize, BBox)> = props.iter().enumerate().flat_map(|(n, p)| p.boxes.iter().map(move |b| (n, *b))).collect();
        let mut results: Vec<InstanceSet> = (0..n_images).map(|_| InstanceSet::empty(width, height)).collect();
        if all.is_empty() {
            return Ok(results);
        }
        let (cls, reg) = self.box_forward(g, store, levels, &all)?;
        let coder = BoxCoder::new(self.cfg.roi_box_weights);
        let mut per_image: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n_images];
        for (i, (n, prop)) in all.iter().enumerate() {
            let d: [f64; 4] = std::array::from_fn(|k| g.value(reg).data()[i * 4 + k].as_f64());
            let b = coder.decode(d, prop).clip(width, height);
            if b.width() >= 1e-2 && b.height() >= 1e-2 {
                per_image[*n].0.push(b);
                per_image[*n].1.push(sigmoid(g.value(cls).data()[i].as_f64()));
            }
        }
        let mut kept: Vec<(usize, BBox, f64)> = Vec::new();
        for (n, (b, s)) in per_image.iter().enumerate() {
            for k in select_detections(b, s, self.cfg.score_thresh, self.cfg.det_nms_iou, self.cfg.max_det) {
                kept.push((n, b[k], s[k]));
            }
        }
        if kept.is_empty() {
            return Ok(results);
        }
        let boxes: Vec<(usize, BBox)> = kept.iter().map(|&(n, b, _)| (n, b)).collect();
        let logits = self.mask_forward(g, store, levels, &boxes)?;
        let m = self.cfg.mask_size();
        for (i, &(n, b, s)) in kept.iter().enumerate() {
            let probs: Vec<f32> = g.value(logits).data()[i * m * m..(i + 1) * m * m].iter().map(|&v| sigmoid(v.as_f64()) as f32).collect();
            results[n].instances.push(Instance { bbox: b, mask: paste_mask(&probs, m, &b, width, height), score: s, height_m: None });
        }
        Ok(results)
    }
}

/// Ground-truth masks as an `(n_gt, 1, H, W)` 0/1 tensor.
fn gt_mask_tensor<F: Scalar>(gt: &InstanceSet) -> Tensor<F> {
    let (w, h) = (gt.width, gt.height);
    let mut data = Vec::with_capacity(gt.instances.len() * w * h);
    for inst in &gt.instances {
        data.extend(inst.mask.data.iter().map(|&v| if v != 0 { F::one() } else { F::zero() }));
    }
    Tensor::from_vec(&[gt.instances.len(), 1, h, w], data).expect("mask sizes match the image")
}
