//! Per-level anchor grids.

use crate::data::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub level: usize,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.width, self.height)
    }
}

/// Anchors of every level, each level ordered by `(y·W + x)·A + a` where `a`
/// runs over `ratios` (height / width). Level `i` uses `scales[i]` and
/// `strides[i]`; anchor centers sit at cell centers.
pub fn generate_anchors(level_hw: &[(usize, usize)], strides: &[usize], scales: &[f64], ratios: &[f64]) -> Vec<Vec<Anchor>> {
    level_hw
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let (s, st) = (scales[l], strides[l] as f64);
            let shapes: Vec<(f64, f64)> = ratios.iter().map(|r| (s / r.sqrt(), s * r.sqrt())).collect();
            let mut out = Vec::with_capacity(h * w * ratios.len());
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * st, (y as f64 + 0.5) * st);
                    out.extend(shapes.iter().map(|&(aw, ah)| Anchor { cx, cy, width: aw, height: ah, level: l }));
                }
            }
            out
        })
        .collect()
}
