//! Pyramid pooling over the height feature and the sigmoid height head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{check_h_max, HeightMap};
use crate::error::{LightError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpmConfig {
    pub bin_sizes: Vec<usize>,
}

impl Default for PpmConfig {
    fn default() -> Self {
        Self { bin_sizes: vec![1, 2, 3, 6] }
    }
}

impl PpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_sizes.is_empty() || self.bin_sizes[0] == 0 {
            return Err(LightError::config("ppm.bin_sizes", "need at least one positive bin size"));
        }
        if self.bin_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LightError::config("ppm.bin_sizes", "must be strictly increasing"));
        }
        Ok(())
    }
}

/// Pyramid pooling module: per bin size, average pool → 1×1 conv to `d/4` →
/// ReLU → bilinear upsample; concatenated with the input and fused by a 3×3
/// conv back to `d` channels.
#[derive(Clone, Debug)]
pub struct Ppm {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Ppm {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &PpmConfig, d: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if d % 4 != 0 {
            return Err(LightError::config("ppm.out_channels", format!("{d} is not divisible by 4")));
        }
        let q = d / 4;
        let branches = cfg
            .bin_sizes
            .iter()
            .map(|b| Conv2d::new(store, &format!("ppm.bin{b}"), d, q, 1, 1, true, Init::KaimingFanOut, rng))
            .collect();
        let cat = d + q * cfg.bin_sizes.len();
        let fuse = Conv2d::new(store, "ppm.fuse", cat, d, 3, 1, true, Init::Normal((1.0 / (9 * cat) as f64).sqrt()), rng);
        Ok(Self { bins: cfg.bin_sizes.clone(), branches, fuse })
    }

    /// Concatenation of the input and the upsampled branches, before fusion.
    pub fn pyramid<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.branches[0].in_channels {
            return Err(LightError::shape(format!("PPM expects {} channels, got {}", self.branches[0].in_channels, c)));
        }
        let mut parts = vec![x];
        for (&b, conv) in self.bins.iter().zip(&self.branches) {
            if b > h || b > w {
                return Err(LightError::config("ppm.bin_sizes", format!("bin {b} exceeds the {h}x{w} feature map")));
            }
            let p = g.adaptive_avg_pool(x, b)?;
            let p = conv.forward(g, store, p)?;
            let p = g.relu(p);
            parts.push(g.bilinear_resize(p, h, w)?);
        }
        g.concat_channels(&parts)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let cat = self.pyramid(g, store, x)?;
        let y = self.fuse.forward(g, store, cat)?;
        Ok(g.relu(y))
    }
}

pub fn ppm_forward<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, ppm: &Ppm, x: Var) -> Result<Var> {
    ppm.forward(g, store, x)
}

/// `σ(Conv(BN(Conv(F))))` with widths `d → d/2 → 1`, upsampled ×4.
#[derive(Clone, Debug)]
pub struct HeightHead {
    pub conv1: Conv2d,
    pub bn: BatchNorm2d,
    pub conv2: Conv2d,
}

impl HeightHead {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        let mid = (d / 2).max(1);
        Self {
            conv1: Conv2d::new(store, "height_head.conv1", d, mid, 3, 1, false, Init::KaimingFanOut, rng),
            bn: BatchNorm2d::new(store, "height_head.bn", mid),
            conv2: Conv2d::new(store, "height_head.conv2", mid, 1, 3, 1, true, Init::Normal(1e-3), rng),
        }
    }

    /// Stride-4 logits, before the sigmoid and the upsampling.
    pub fn logits<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, train: bool) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, train)?;
        self.conv2.forward(g, store, y)
    }

    /// Normalized heights `(N, 1, 4h, 4w)` in `(0, 1)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, train: bool) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let z = self.logits(g, store, x, train)?;
        let s = g.sigmoid(z);
        g.bilinear_resize(s, 4 * h, 4 * w)
    }
}

pub fn height_head<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, head: &HeightHead, x: Var, train: bool) -> Result<Var> {
    head.forward(g, store, x, train)
}

/// Heights in meters from normalized values.
pub fn denormalize(norm: &HeightMap, h_max: f64) -> Result<HeightMap> {
    check_h_max(h_max)?;
    Ok(HeightMap {
        rows: norm.rows,
        cols: norm.cols,
        values: norm.values.iter().map(|&v| (v as f64 * h_max) as f32).collect(),
    })
}

/// Heights divided by `h_max`, clipped to `[0, 1]`.
pub fn normalize(map: &HeightMap, h_max: f64) -> Result<HeightMap> {
    Ok(HeightMap { rows: map.rows, cols: map.cols, values: map.normalized(h_max)? })
}
