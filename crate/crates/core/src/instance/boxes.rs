//! Box parameterization against anchors and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::data::BBox;

/// Largest `tw`/`th` accepted when decoding, `ln(1000 / 16)`.
pub const DELTA_CLAMP: f64 = 4.135166556742356;

/// `(tx, ty, tw, th)` scaled by per-component weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self { weights: [1.0; 4] }
    }
}

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, target: &BBox, anchor: &BBox) -> [f64; 4] {
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let (gx, gy) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (gx - ax) / aw,
            wy * (gy - ay) / ah,
            ww * (target.width() / aw).ln(),
            wh * (target.height() / ah).ln(),
        ]
    }

    pub fn decode(&self, delta: [f64; 4], anchor: &BBox) -> BBox {
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        let cx = delta[0] / wx * aw + ax;
        let cy = delta[1] / wy * ah + ay;
        let w = (delta[2] / ww).min(DELTA_CLAMP).exp() * aw;
        let h = (delta[3] / wh).min(DELTA_CLAMP).exp() * ah;
        BBox::from_center(cx, cy, w, h)
    }
}

/// Regression target of `target` relative to `anchor`, unit weights.
pub fn encode_box(target: &BBox, anchor: &BBox) -> [f64; 4] {
    BoxCoder::default().encode(target, anchor)
}

pub fn decode_box(delta: [f64; 4], anchor: &BBox) -> BBox {
    BoxCoder::default().decode(delta, anchor)
}

/// Greedy NMS. Returns indices into `boxes` of the survivors in descending
/// score order (ties keep input order); a box is dropped when its IoU with an
/// already kept box is at least `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    let mut removed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !removed[j] && boxes[i].iou(&boxes[j]) >= iou_thresh {
                removed[j] = true;
            }
        }
    }
    keep
}
