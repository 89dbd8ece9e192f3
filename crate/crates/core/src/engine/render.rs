//! Visualizations written next to inference outputs.

use crate::data::{HeightMap, ImageTile, InstanceSet};

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.35, 0.95],
    [0.95, 0.75, 0.10],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.45, 0.10],
    [0.55, 0.85, 0.15],
];

/// Image with each instance mask tinted in its own color and its box outlined.
pub fn instance_overlay(image: &ImageTile, set: &InstanceSet) -> ImageTile {
    let mut out = image.clone();
    for (k, inst) in set.instances.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for y in 0..out.height.min(inst.mask.height) {
            for x in 0..out.width.min(inst.mask.width) {
                if inst.mask.get(x, y) {
                    let p = out.pixel(x, y);
                    out.set_pixel(x, y, std::array::from_fn(|i| 0.5 * p[i] + 0.5 * c[i]));
                }
            }
        }
        let b = inst.bbox.clip(out.width, out.height);
        let (x1, y1) = (b.x1.floor() as usize, b.y1.floor() as usize);
        let x2 = (b.x2.ceil() as usize).saturating_sub(1).min(out.width.saturating_sub(1));
        let y2 = (b.y2.ceil() as usize).saturating_sub(1).min(out.height.saturating_sub(1));
        if x1 > x2 || y1 > y2 {
            continue;
        }
        for x in x1..=x2 {
            out.set_pixel(x, y1, c);
            out.set_pixel(x, y2, c);
        }
        for y in y1..=y2 {
            out.set_pixel(x1, y, c);
            out.set_pixel(x2, y, c);
        }
    }
    out
}

/// Piecewise-linear dark-blue → cyan → yellow → red ramp over `[0, h_max]`.
fn ramp(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 4] = [[0.05, 0.05, 0.35], [0.10, 0.75, 0.85], [0.95, 0.90, 0.15], [0.85, 0.10, 0.05]];
    let t = t.clamp(0.0, 1.0) * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f32;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

pub fn height_overlay(map: &HeightMap, h_max: f64) -> ImageTile {
    let mut out = ImageTile::filled(map.cols, map.rows, [0.0; 3]);
    for y in 0..map.rows {
        for x in 0..map.cols {
            out.set_pixel(x, y, ramp((map.at(x, y) as f64 / h_max) as f32));
        }
    }
    out
}
