//! IoU matching of anchors / proposals to ground truth and balanced sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Match {
    Positive(usize),
    Negative,
    Ignored,
}

/// Two-threshold matcher. With `allow_low_quality`, every ground-truth box
/// also claims the candidates that reach its highest IoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matcher {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub allow_low_quality: bool,
}

impl Matcher {
    /// Matches each candidate against `gts`.
    pub fn assign(&self, candidates: &[BBox], gts: &[BBox]) -> Vec<Match> {
        if gts.is_empty() {
            return vec![Match::Negative; candidates.len()];
        }
        let ious: Vec<Vec<f64>> = candidates.iter().map(|c| gts.iter().map(|g| c.iou(g)).collect()).collect();
        let mut out: Vec<Match> = ious
            .iter()
            .map(|row| {
                let (best, &v) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("non-empty");
                if v >= self.positive_iou {
                    Match::Positive(best)
                } else if v < self.negative_iou {
                    Match::Negative
                } else {
                    Match::Ignored
                }
            })
            .collect();
        if self.allow_low_quality {
            for gi in 0..gts.len() {
                let best = ious.iter().map(|r| r[gi]).fold(0.0f64, f64::max);
                if best <= 0.0 {
                    continue;
                }
                for (ci, row) in ious.iter().enumerate() {
                    if row[gi] == best {
                        let argmax = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                            .map(|(i, _)| i)
                            .expect("non-empty");
                        out[ci] = Match::Positive(argmax);
                    }
                }
            }
        }
        out
    }
}

/// Picks at most `batch` candidates, of which at most `batch · positive_fraction`
/// are positive; the rest are filled with negatives. Returns `(positives, negatives)`
/// as candidate indices, each in random order.
pub fn sample_balanced<R: Rng>(matches: &[Match], batch: usize, positive_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..matches.len()).filter(|&i| matches!(matches[i], Match::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..matches.len()).filter(|&i| matches[i] == Match::Negative).collect();
    let n_pos = pos.len().min((batch as f64 * positive_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    (pos, neg)
}
