//! Training, evaluation, inference and benchmarking on top of [`LightNet`].

mod checkpoint;
mod optim;
mod render;
mod run;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamMeta, CHECKPOINT_MAGIC};
pub use optim::{clip_grad_norm, LrSchedule, Sgd};
pub use render::{height_overlay, instance_overlay};
pub use run::{
    bench_model, DatasetInfo, BENCH_WARMUP,
    bench, evaluate, evaluate_samples, flip_sample, infer, resize_image, train, train_samples, BenchReport, EvalReport, InferOutput,
    StepLog, Timing, TrainSummary,
};

use serde::{Deserialize, Serialize};

use crate::error::{LightError, Result};
use crate::losses::LossWeights;
use crate::model::{Mode, ModelConfig};

/// Environment variable that overrides [`TrainConfig::seed`].
pub const SEED_ENV: &str = "LIGHT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Learning-rate multiplier at the first warmup step.
    pub warmup_factor: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Global gradient-norm bound; `null` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub image_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Random horizontal / vertical flips of training samples.
    pub augment_flips: bool,
    /// Validation every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::JointGcti,
            epochs: 36,
            batch_size: 2,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 500,
            warmup_factor: 0.001,
            lr_steps: vec![24, 33],
            lr_gamma: 0.1,
            clip_grad_norm: Some(10.0),
            image_size: 512,
            seed: 0,
            loss_weights: LossWeights::default(),
            augment_flips: true,
            eval_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration for 128×128 synthetic scenes on a single CPU core.
    pub fn desk(mode: Mode, seed: u64) -> Self {
        let mut cfg = Self { mode, seed, image_size: 128, ..Self::default() };
        cfg.epochs = 12;
        cfg.lr_steps = vec![8, 11];
        cfg.warmup_steps = 100;
        let m = &mut cfg.model;
        m.backbone.depth = [1, 1, 1, 1];
        m.backbone.width = 16;
        m.backbone.fpn_channels = 32;
        m.instance.anchor_scales = vec![16.0, 32.0, 64.0, 128.0];
        m.instance.fc_dim = 256;
        m.instance.pre_nms = 600;
        m.instance.post_nms = 128;
        m.instance.roi_batch = 64;
        m.instance.max_mask_rois = 16;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(LightError::config(f, m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("must be finite and nonnegative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be finite and nonnegative, got {}", self.weight_decay));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return bad("warmup_factor", format!("must lie in (0, 1], got {}", self.warmup_factor));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad("lr_gamma", format!("must be positive, got {}", self.lr_gamma));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad("clip_grad_norm", format!("must be positive, got {c}"));
            }
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad("image_size", format!("must be a positive multiple of 32, got {}", self.image_size));
        }
        self.loss_weights.validate()?;
        self.model.backbone.validate()?;
        self.model.gcti.validate(4)?;
        self.model.ppm.validate()?;
        self.model.instance.validate(4)
    }

    /// Parses a JSON config; unknown or ill-typed fields are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LightError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `LIGHT_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| LightError::config("seed", format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            warmup_factor: self.warmup_factor,
            milestones: self.lr_steps.clone(),
            gamma: self.lr_gamma,
        }
    }
}
