//! Shared residual backbone, feature pyramid, and the height-branch feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LightError, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Init, ParamStore};
use crate::tensor::Scalar;

/// Strides of the four backbone stages and pyramid levels.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Residual blocks per stage.
    pub depth: [usize; 4],
    /// Channels of the first stage; stage `i` has `width << i`.
    pub width: usize,
    /// Channel count `d` of every pyramid level and of the height feature.
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { depth: [2, 2, 2, 2], width: 64, fpn_channels: 256 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth.contains(&0) {
            return Err(LightError::config("backbone.depth", "every stage needs at least one block"));
        }
        if self.width == 0 {
            return Err(LightError::config("backbone.width", "must be positive"));
        }
        if self.fpn_channels == 0 || self.fpn_channels % 4 != 0 {
            return Err(LightError::config("backbone.fpn_channels", "must be a positive multiple of 4"));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        [self.width, self.width * 2, self.width * 4, self.width * 8]
    }
}

/// Multi-scale features of one batch, as graph nodes.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `F_1..F_l` at strides 4, 8, 16, 32.
    pub levels: Vec<Var>,
    /// `F_h`, stride 4; absent when the height branch is disabled.
    pub height_feature: Option<Var>,
}

impl FeaturePyramid {
    /// Levels followed by the height feature, the order GCTI works in.
    pub fn all(&self) -> Vec<Var> {
        self.levels.iter().copied().chain(self.height_feature).collect()
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBnRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = ConvBnRelu::new(store, &format!("{name}.a"), cin, cout, 3, stride, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.b.conv"), cout, cout, 3, 1, false, Init::KaimingFanOut, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.b.bn"), cout);
        // Residual branches start as identity maps.
        store.zero_prefix(&format!("{name}.b.bn.gamma"));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.proj.conv"), cin, cout, 1, stride, false, Init::KaimingFanOut, rng),
                BatchNorm2d::new(store, &format!("{name}.proj.bn"), cout),
            )
        });
        Self { conv1, conv2, bn2, shortcut }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, train: bool) -> Result<Var> {
        let y = self.conv1.forward(g, store, x, train)?;
        let y = self.conv2.forward(g, store, y)?;
        let y = self.bn2.forward(g, store, y, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, train)?
            }
            None => x,
        };
        let y = g.add(y, skip)?;
        Ok(g.relu(y))
    }
}

/// Small residual network with four stages at strides 4/8/16/32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: [ConvBnRelu; 2],
    stages: Vec<Vec<BasicBlock>>,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem = [
            ConvBnRelu::new(store, "backbone.stem1", 3, w, 3, 2, rng),
            ConvBnRelu::new(store, "backbone.stem2", w, w, 3, 2, rng),
        ];
        let chans = cfg.stage_channels();
        let mut stages = Vec::with_capacity(4);
        let mut cin = w;
        for (s, (&n, &cout)) in cfg.depth.iter().zip(&chans).enumerate() {
            let blocks = (0..n)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let blk = BasicBlock::new(store, &format!("backbone.s{}.b{}", s + 1, b), cin, cout, stride, rng);
                    cin = cout;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self { stem, stages, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Four stage outputs at strides 4, 8, 16, 32 with widths `w, 2w, 4w, 8w`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, image: Var, train: bool) -> Result<[Var; 4]> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(LightError::shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(LightError::shape(format!("input {h}x{w}: both sides must be nonzero multiples of 32")));
        }
        let mut x = self.stem[0].forward(g, store, image, train)?;
        x = self.stem[1].forward(g, store, x, train)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(g, store, x, train)?;
            }
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}

/// Top-down feature pyramid: 1×1 laterals to `d` channels, nearest-neighbour
/// upsampling merges, and a 3×3 output convolution per level.
#[derive(Clone, Debug)]
pub struct Fpn {
    laterals: Vec<Conv2d>,
    outputs: Vec<Conv2d>,
}

impl Fpn {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.fpn_channels;
        let laterals = cfg
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("fpn.lateral{}", i + 1), c, d, 1, 1, true, Init::Normal((1.0 / c as f64).sqrt()), rng))
            .collect();
        let outputs = (0..4)
            .map(|i| Conv2d::new(store, &format!("fpn.output{}", i + 1), d, d, 3, 1, true, Init::Normal((1.0 / (9 * d) as f64).sqrt()), rng))
            .collect();
        Self { laterals, outputs }
    }

    pub fn lateral_ids(&self) -> Vec<crate::nn::ParamId> {
        self.laterals.iter().map(|c| c.weight).collect()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, stages: &[Var]) -> Result<Vec<Var>> {
        if stages.len() != self.laterals.len() {
            return Err(LightError::shape(format!("FPN expects {} stages, got {}", self.laterals.len(), stages.len())));
        }
        for (i, (&s, lat)) in stages.iter().zip(&self.laterals).enumerate() {
            let (_, c, _, _) = g.value(s).dims4()?;
            if c != lat.in_channels {
                return Err(LightError::shape(format!("FPN stage {}: expected {} channels, got {}", i + 1, lat.in_channels, c)));
            }
        }
        let mut merged: Vec<Option<Var>> = vec![None; stages.len()];
        let mut top: Option<Var> = None;
        for i in (0..stages.len()).rev() {
            let lat = self.laterals[i].forward(g, store, stages[i])?;
            let m = match top {
                Some(t) => {
                    let (_, _, h, w) = g.value(lat).dims4()?;
                    let up = g.nearest_resize(t, h, w)?;
                    g.add(lat, up)?
                }
                None => lat,
            };
            merged[i] = Some(m);
            top = Some(m);
        }
        merged
            .into_iter()
            .zip(&self.outputs)
            .map(|(m, conv)| conv.forward(g, store, m.expect("every level merged")))
            .collect()
    }
}

/// `F_h`: one 3×3 convolution over the stride-4 stage.
#[derive(Clone, Debug)]
pub struct HeightFeature {
    pub conv: Conv2d,
}

impl HeightFeature {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let cin = cfg.width;
        let conv = Conv2d::new(
            store,
            "height.feature",
            cin,
            cfg.fpn_channels,
            3,
            1,
            true,
            Init::Normal((1.0 / (9 * cin) as f64).sqrt()),
            rng,
        );
        Self { conv }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, stages: &[Var]) -> Result<Var> {
        let s = *stages.first().ok_or_else(|| LightError::shape("height feature needs the stride-4 stage"))?;
        self.conv.forward(g, store, s)
    }
}
