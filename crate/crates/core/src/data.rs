//! Domain types shared by the data generator, the network and the metrics.

use serde::{Deserialize, Serialize};

use crate::error::{LightError, Result};
use crate::tensor::{Scalar, Tensor};

/// An H×W×3 RGB image with intensities in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageTile {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(LightError::shape(format!(
                "image {}x{} needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantizes to 8 bits per channel, as stored on disk.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Normalized `(3, H, W)` network input: `(v − 0.5) / 0.25`.
    pub fn to_chw<F: Scalar>(&self) -> Vec<F> {
        let hw = self.width * self.height;
        let mut out = vec![F::zero(); 3 * hw];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = F::of(((px[c] - 0.5) / 0.25) as f64);
            }
        }
        out
    }
}

/// Stack of images as an `(N, 3, H, W)` tensor.
pub fn batch_tensor<F: Scalar>(images: &[&ImageTile]) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| LightError::shape("empty image batch"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(LightError::shape("images in a batch must share a size"));
        }
        data.extend(im.to_chw::<F>());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Per-pixel nonnegative heights in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl HeightMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.cols + x]
    }

    /// Heights divided by `h_max` and clipped to `[0, 1]`.
    pub fn normalized(&self, h_max: f64) -> Result<Vec<f32>> {
        check_h_max(h_max)?;
        Ok(self.values.iter().map(|&v| ((v as f64 / h_max).clamp(0.0, 1.0)) as f32).collect())
    }
}

pub(crate) fn check_h_max(h_max: f64) -> Result<()> {
    if h_max > 0.0 && h_max.is_finite() {
        Ok(())
    } else {
        Err(LightError::config("h_max", format!("must be a positive finite height, got {h_max}")))
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]` in input pixels; pixel `i` spans `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Full-image 0/1 mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight box of the nonzero pixels, in `[x1, y1, x2, y2)` pixel-edge units.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    /// Row-major run lengths, starting with a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut cur = 0u8;
        let mut run = 0u32;
        for &v in &self.data {
            let v = (v != 0) as u8;
            if v == cur {
                run += 1;
            } else {
                counts.push(run);
                cur = v;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(width: usize, height: usize, counts: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for (i, &c) in counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        if data.len() != width * height {
            return Err(LightError::data(format!(
                "RLE covers {} pixels, mask is {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }
}

/// One building: ground truth (`score == 1`, `height_m` set) or a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub score: f64,
    pub height_m: Option<f64>,
}

/// All building instances of one image; predictions are kept in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, instances: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn sort_by_score(&mut self) {
        self.instances.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
}
