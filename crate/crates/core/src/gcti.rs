//! Gated cross-task interaction between the pyramid levels and the height feature.
//!
//! Each target feature `F_t` is enhanced by every other feature `F_i` (the
//! sources). Sources are resized to the target, passed through a gate encoder
//! giving a gate feature `F_i^g = Conv_1(F_i)` and a gate map
//! `M_i = σ(Conv_2(F_i^g))`, and summed as `F_agg = Σ M_i ⊙ F_i^g`. The target
//! is fused asymmetrically, `F'_agg = (1 + M_t) ⊙ F_t^g + (1 − M_t) ⊙ F_agg`,
//! and the result is `Conv(F'_agg) + F'_agg`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LightError, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tensor::Scalar;

/// Position of a feature in the interaction: a pyramid level or the height feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSlot {
    Level(usize),
    Height,
}

impl FeatureSlot {
    fn index(self, levels: usize) -> usize {
        match self {
            FeatureSlot::Level(i) => i,
            FeatureSlot::Height => levels,
        }
    }

    fn tag(self) -> String {
        match self {
            FeatureSlot::Level(i) => format!("p{}", i + 1),
            FeatureSlot::Height => "h".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GctiConfig {
    pub kernel: usize,
    /// One gate encoder per target, reused for the target and all its sources.
    pub share_gate_params: bool,
    /// Features that get enhanced; `None` enhances all of them. The others pass through unchanged.
    pub targets: Option<Vec<FeatureSlot>>,
}

impl Default for GctiConfig {
    fn default() -> Self {
        Self { kernel: 3, share_gate_params: false, targets: None }
    }
}

impl GctiConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(LightError::config("gcti.kernel", "must be odd and positive"));
        }
        if let Some(ts) = &self.targets {
            for t in ts {
                if let FeatureSlot::Level(i) = t {
                    if *i >= levels {
                        return Err(LightError::config("gcti.targets", format!("level {} out of range 0..{}", i, levels)));
                    }
                }
            }
        }
        Ok(())
    }

    fn is_target(&self, slot: FeatureSlot) -> bool {
        self.targets.as_ref().is_none_or(|ts| ts.contains(&slot))
    }
}

/// `Conv_1` and `Conv_2` of one gate encoder.
#[derive(Clone, Debug)]
pub struct GateEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl GateEncoder {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, d: usize, kernel: usize, rng: &mut R) -> Self {
        let std = (1.0 / (kernel * kernel * d) as f64).sqrt();
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), d, d, kernel, 1, true, Init::Normal(std), rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), d, d, kernel, 1, true, Init::Normal(std), rng),
        }
    }
}

/// Parameters for enhancing one target.
#[derive(Clone, Debug)]
pub struct GctiUnit {
    pub target: FeatureSlot,
    pub target_encoder: GateEncoder,
    /// One encoder per source, in source order; empty when shared.
    pub source_encoders: Vec<GateEncoder>,
    pub output: Conv2d,
}

impl GctiUnit {
    fn source_encoder(&self, i: usize) -> &GateEncoder {
        self.source_encoders.get(i).unwrap_or(&self.target_encoder)
    }
}

/// Record of one target enhancement, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GctiApplication {
    pub target: FeatureSlot,
    pub sources: Vec<FeatureSlot>,
}

#[derive(Clone, Debug)]
pub struct Gcti {
    pub levels: usize,
    pub units: Vec<GctiUnit>,
    pub cfg: GctiConfig,
}

impl Gcti {
    /// Builds parameters for `levels` pyramid levels plus the height feature, all with `d` channels.
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &GctiConfig, levels: usize, d: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(levels)?;
        let slots = all_slots(levels);
        let mut units = Vec::new();
        for &t in &slots {
            if !cfg.is_target(t) {
                continue;
            }
            let base = format!("gcti.{}", t.tag());
            let target_encoder = GateEncoder::new(store, &format!("{base}.target"), d, cfg.kernel, rng);
            let source_encoders = if cfg.share_gate_params {
                Vec::new()
            } else {
                slots
                    .iter()
                    .filter(|&&s| s != t)
                    .map(|s| GateEncoder::new(store, &format!("{base}.src_{}", s.tag()), d, cfg.kernel, rng))
                    .collect()
            };
            let output = Conv2d::new(store, &format!("{base}.out"), d, d, cfg.kernel, 1, true, Init::Zeros, rng);
            units.push(GctiUnit { target: t, target_encoder, source_encoders, output });
        }
        Ok(Self { levels, units, cfg: cfg.clone() })
    }
}

fn all_slots(levels: usize) -> Vec<FeatureSlot> {
    (0..levels).map(FeatureSlot::Level).chain(std::iter::once(FeatureSlot::Height)).collect()
}

/// Bilinear resize of a source to the target's spatial size.
pub fn align_source<F: Scalar>(g: &mut Graph<F>, source: Var, target_hw: (usize, usize)) -> Result<Var> {
    g.bilinear_resize(source, target_hw.0, target_hw.1)
}

/// Returns `(F^g, M)`.
pub fn gate_encode<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, enc: &GateEncoder, x: Var) -> Result<(Var, Var)> {
    let fg = enc.conv1.forward(g, store, x)?;
    let pre = enc.conv2.forward(g, store, fg)?;
    Ok((fg, g.sigmoid(pre)))
}

/// `Σ_i M_i ⊙ F_i^g` over `(M_i, F_i^g)` pairs.
pub fn aggregate_sources<F: Scalar>(g: &mut Graph<F>, pairs: &[(Var, Var)]) -> Result<Var> {
    g.gated_sum(pairs)
}

/// `(1 + M_t) ⊙ F_t^g + (1 − M_t) ⊙ F_agg`.
pub fn gated_fusion<F: Scalar>(g: &mut Graph<F>, target_gate_feature: Var, target_gate: Var, agg: Var) -> Result<Var> {
    g.gated_fusion(target_gate_feature, target_gate, agg)
}

/// `Conv(F'_agg) + F'_agg`.
pub fn interaction_output<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, conv: &Conv2d, fused: Var) -> Result<Var> {
    let y = conv.forward(g, store, fused)?;
    g.add(y, fused)
}

/// Enhances one target from its sources.
pub fn enhance_target<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, unit: &GctiUnit, target: Var, sources: &[Var]) -> Result<Var> {
    let (_, _, h, w) = g.value(target).dims4()?;
    let mut pairs = Vec::with_capacity(sources.len());
    for (i, &s) in sources.iter().enumerate() {
        let aligned = align_source(g, s, (h, w))?;
        let (fg, m) = gate_encode(g, store, unit.source_encoder(i), aligned)?;
        pairs.push((m, fg));
    }
    let (tg, mt) = gate_encode(g, store, &unit.target_encoder, target)?;
    let agg = aggregate_sources(g, &pairs)?;
    let fused = gated_fusion(g, tg, mt, agg)?;
    interaction_output(g, store, &unit.output, fused)
}

/// Enhances the features `F_1..F_l, F_h` (in that order). Every enhancement
/// reads the original features; untargeted features are returned as is.
pub fn apply_gcti<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    gcti: &Gcti,
    features: &[Var],
) -> Result<(Vec<Var>, Vec<GctiApplication>)> {
    if features.len() != gcti.levels + 1 {
        return Err(LightError::shape(format!(
            "interaction expects {} levels plus the height feature, got {} features",
            gcti.levels,
            features.len()
        )));
    }
    let d = g.value(features[0]).dims4()?.1;
    for (i, &f) in features.iter().enumerate() {
        let c = g.value(f).dims4()?.1;
        if c != d {
            return Err(LightError::shape(format!("feature {i} has {c} channels, expected {d}")));
        }
    }
    let slots = all_slots(gcti.levels);
    let mut out = features.to_vec();
    let mut log = Vec::with_capacity(gcti.units.len());
    for unit in &gcti.units {
        let t = unit.target.index(gcti.levels);
        let src_slots: Vec<FeatureSlot> = slots.iter().copied().filter(|&s| s != unit.target).collect();
        let sources: Vec<Var> = src_slots.iter().map(|s| features[s.index(gcti.levels)]).collect();
        out[t] = enhance_target(g, store, unit, features[t], &sources)?;
        log.push(GctiApplication { target: unit.target, sources: src_slots });
    }
    Ok((out, log))
}
