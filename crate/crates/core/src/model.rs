//! The full network and its ablation modes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{batch_tensor, HeightMap, ImageTile, InstanceSet};
use crate::error::{LightError, Result};
use crate::feature_extractor::{Backbone, BackboneConfig, FeaturePyramid, Fpn, HeightFeature, STRIDES};
use crate::gcti::{apply_gcti, Gcti, GctiConfig};
use crate::height_branch::{HeightHead, Ppm, PpmConfig};
use crate::instance::{InstanceBranch, InstanceConfig, InstanceStats};
use crate::losses::{height_loss, total_loss, HeightLossMask, LossReport, LossWeights, HEIGHT_BETA};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Which branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "joint+gcti", alias = "joint_gcti")]
    JointGcti,
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "seg_only")]
    SegOnly,
    #[serde(rename = "height_only")]
    HeightOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::JointGcti, Mode::Joint, Mode::SegOnly, Mode::HeightOnly];

    pub fn has_instances(self) -> bool {
        self != Mode::HeightOnly
    }

    pub fn has_height(self) -> bool {
        self != Mode::SegOnly
    }

    pub fn has_gcti(self) -> bool {
        self == Mode::JointGcti
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::JointGcti => "joint+gcti",
            Mode::Joint => "joint",
            Mode::SegOnly => "seg_only",
            Mode::HeightOnly => "height_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = LightError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint+gcti" | "joint_gcti" => Ok(Mode::JointGcti),
            "joint" => Ok(Mode::Joint),
            "seg_only" => Ok(Mode::SegOnly),
            "height_only" => Ok(Mode::HeightOnly),
            other => Err(LightError::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gcti: GctiConfig,
    pub ppm: PpmConfig,
    pub instance: InstanceConfig,
    pub height_loss_mask: HeightLossMask,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            gcti: GctiConfig::default(),
            ppm: PpmConfig::default(),
            instance: InstanceConfig::default(),
            height_loss_mask: HeightLossMask::AllPixels,
        }
    }
}

/// Per-image supervision.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub instances: &'a InstanceSet,
    /// Heights divided by `h_max`, row-major at input resolution.
    pub height_norm: &'a [f32],
}

/// Network output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub instances: Option<InstanceSet>,
    /// Heights in meters at input resolution.
    pub height: Option<HeightMap>,
}

/// Loss of one training batch.
pub struct StepLoss {
    pub total: Var,
    pub report: LossReport,
    pub stats: InstanceStats,
}

/// Which parts of a forward pass to run; lets one set of weights be timed as
/// a single-task network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub instances: bool,
    pub height: bool,
    pub gcti: bool,
}

impl From<Mode> for Branches {
    fn from(m: Mode) -> Self {
        Self { instances: m.has_instances(), height: m.has_height(), gcti: m.has_gcti() }
    }
}

#[derive(Clone, Debug)]
pub struct LightNet {
    pub mode: Mode,
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub fpn: Option<Fpn>,
    pub height_feature: Option<HeightFeature>,
    pub gcti: Option<Gcti>,
    pub ppm: Option<Ppm>,
    pub height_head: Option<HeightHead>,
    pub instance: Option<InstanceBranch>,
}

impl LightNet {
    /// Creates the parameters for `mode` in `store`. Every module draws from
    /// its own random stream, so a given seed yields the same weights for the
    /// shared modules in every mode.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, mode: Mode, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let d = cfg.backbone.fpn_channels;
        let levels = STRIDES.len();
        let backbone = Backbone::new(store, &cfg.backbone, &mut rng(1))?;
        let fpn = mode.has_instances().then(|| Fpn::new(store, &cfg.backbone, &mut rng(2)));
        let height_feature = mode.has_height().then(|| HeightFeature::new(store, &cfg.backbone, &mut rng(3)));
        let gcti = if mode.has_gcti() { Some(Gcti::new(store, &cfg.gcti, levels, d, &mut rng(4))?) } else { None };
        let (ppm, height_head) = if mode.has_height() {
            let mut r = rng(5);
            (Some(Ppm::new(store, &cfg.ppm, d, &mut r)?), Some(HeightHead::new(store, d, &mut r)))
        } else {
            (None, None)
        };
        let instance = if mode.has_instances() {
            Some(InstanceBranch::new(store, &cfg.instance, levels, d, &mut rng(6))?)
        } else {
            None
        };
        Ok(Self { mode, cfg: cfg.clone(), backbone, fpn, height_feature, gcti, ppm, height_head, instance })
    }

    /// Shared features with interaction applied when enabled.
    pub fn features<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, images: Var, train: bool, br: Branches) -> Result<FeaturePyramid> {
        let stages = self.backbone.forward(g, store, images, train)?;
        let levels = match (&self.fpn, br.instances) {
            (Some(fpn), true) => fpn.forward(g, store, &stages)?,
            _ => Vec::new(),
        };
        let height_feature = match (&self.height_feature, br.height) {
            (Some(hf), true) => Some(hf.forward(g, store, &stages)?),
            _ => None,
        };
        let mut pyr = FeaturePyramid { levels, height_feature };
        if let (Some(gcti), true, true, true) = (&self.gcti, br.gcti, br.instances, br.height) {
            let (enhanced, _) = apply_gcti(g, store, gcti, &pyr.all())?;
            let l = pyr.levels.len();
            pyr = FeaturePyramid { levels: enhanced[..l].to_vec(), height_feature: Some(enhanced[l]) };
        }
        Ok(pyr)
    }

    fn height_forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, fh: Var, train: bool) -> Result<Var> {
        let ppm = self.ppm.as_ref().expect("height branch present");
        let head = self.height_head.as_ref().expect("height branch present");
        let pooled = ppm.forward(g, store, fh)?;
        head.forward(g, store, pooled, train)
    }

    /// Total training loss for a batch.
    pub fn loss<F: Scalar, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        images: Tensor<F>,
        targets: &[Target],
        weights: &LossWeights,
        step: usize,
        rng: &mut R,
    ) -> Result<StepLoss> {
        let (n, _, h, w) = images.dims4()?;
        if targets.len() != n {
            return Err(LightError::shape(format!("{} targets for {} images", targets.len(), n)));
        }
        let x = g.input(images);
        let pyr = self.features(g, store, x, true, self.mode.into())?;
        let mut stats = InstanceStats::default();
        let (mut det, mut mask, mut height) = (None, None, None);
        if let Some(inst) = &self.instance {
            let gts: Vec<&InstanceSet> = targets.iter().map(|t| t.instances).collect();
            let l = inst.losses(g, store, &pyr.levels, &gts, rng)?;
            det = Some(l.det.total);
            mask = Some(l.mask);
            stats = l.stats;
        }
        if let Some(fh) = pyr.height_feature {
            let pred = self.height_forward(g, store, fh, true)?;
            let mut gt = Vec::with_capacity(n * h * w);
            for t in targets {
                if t.height_norm.len() != h * w {
                    return Err(LightError::shape(format!("height target has {} values, image {}x{}", t.height_norm.len(), w, h)));
                }
                gt.extend(t.height_norm.iter().map(|&v| F::of(v as f64)));
            }
            let gt = Tensor::from_vec(&[n, 1, h, w], gt)?;
            let sel = match self.cfg.height_loss_mask {
                HeightLossMask::AllPixels => None,
                HeightLossMask::BuildingsOnly => Some(building_mask::<F>(targets, h, w)),
            };
            height = Some(height_loss(g, pred, &gt, HEIGHT_BETA, sel.as_ref())?);
        }
        let (total, report) = total_loss(g, det, mask, height, weights, step)?;
        Ok(StepLoss { total, report, stats })
    }

    /// Inference on a batch of equally sized images.
    pub fn predict(&self, store: &ParamStore<f32>, images: &[&ImageTile], h_max: f64, br: Branches) -> Result<Vec<Prediction>> {
        let first = images.first().ok_or_else(|| LightError::shape("empty image batch"))?;
        let (w, h) = (first.width, first.height);
        let mut g = Graph::<f32>::inference();
        let x = g.input(batch_tensor(images)?);
        let pyr = self.features(&mut g, store, x, false, br)?;
        let mut out: Vec<Prediction> = images.iter().map(|_| Prediction { instances: None, height: None }).collect();
        if let Some(fh) = pyr.height_feature {
            let pred = self.height_forward(&mut g, store, fh, false)?;
            for (i, p) in out.iter_mut().enumerate() {
                let values = g.value(pred).sample(i).iter().map(|&v| (v as f64 * h_max) as f32).collect();
                p.height = Some(HeightMap { rows: h, cols: w, values });
            }
        }
        if let (Some(inst), true) = (&self.instance, br.instances) {
            let sets = inst.predict(&mut g, store, &pyr.levels, images.len(), w, h)?;
            for (p, mut set) in out.iter_mut().zip(sets) {
                if let Some(hm) = &p.height {
                    for inst in &mut set.instances {
                        inst.height_m = mean_height(hm, &inst.mask.data);
                    }
                }
                p.instances = Some(set);
            }
        }
        Ok(out)
    }
}

fn building_mask<F: Scalar>(targets: &[Target], h: usize, w: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); targets.len() * h * w];
    for (n, t) in targets.iter().enumerate() {
        for inst in &t.instances.instances {
            for (p, &v) in inst.mask.data.iter().enumerate() {
                if v != 0 {
                    data[n * h * w + p] = F::one();
                }
            }
        }
    }
    Tensor::from_vec(&[targets.len(), 1, h, w], data).expect("sizes agree")
}

fn mean_height(hm: &HeightMap, mask: &[u8]) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for (&m, &v) in mask.iter().zip(&hm.values) {
        if m != 0 {
            s += v as f64;
            c += 1;
        }
    }
    (c > 0).then(|| s / c as f64)
}
