//! Region proposal head, box head and mask head.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{LightError, Result};
use crate::nn::{Conv2d, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Shared 3×3 conv + ReLU followed by sibling 1×1 objectness (`A` channels)
/// and box-delta (`4A` channels) convolutions, applied to every level.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub objectness: Conv2d,
    pub deltas: Conv2d,
    pub anchors_per_cell: usize,
}

impl RpnHead {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, d: usize, anchors_per_cell: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, "rpn.conv", d, d, 3, 1, true, Init::Normal(0.01), rng),
            objectness: Conv2d::new(store, "rpn.objectness", d, anchors_per_cell, 1, 1, true, Init::Normal(0.01), rng),
            deltas: Conv2d::new(store, "rpn.deltas", d, 4 * anchors_per_cell, 1, 1, true, Init::Normal(0.01), rng),
            anchors_per_cell,
        }
    }

    /// Per level: objectness logits `(N, A, H, W)` and deltas `(N, 4A, H, W)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, levels: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut obj = Vec::with_capacity(levels.len());
        let mut del = Vec::with_capacity(levels.len());
        for &l in levels {
            let t = self.conv.forward(g, store, l)?;
            let t = g.relu(t);
            obj.push(self.objectness.forward(g, store, t)?);
            del.push(self.deltas.forward(g, store, t)?);
        }
        Ok((obj, del))
    }

    pub fn output_ids(&self) -> Vec<ParamId> {
        [&self.objectness, &self.deltas].iter().flat_map(|c| [Some(c.weight), c.bias]).flatten().collect()
    }
}

/// Two fully connected layers with sibling class-logit and box-delta outputs.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub in_features: usize,
}

impl BoxHead {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, d: usize, pool: usize, fc: usize, rng: &mut R) -> Self {
        let din = d * pool * pool;
        Self {
            fc1: Linear::new(store, "box_head.fc1", din, fc, Init::KaimingFanOut, rng),
            fc2: Linear::new(store, "box_head.fc2", fc, fc, Init::KaimingFanOut, rng),
            cls: Linear::new(store, "box_head.cls", fc, 1, Init::Normal(0.01), rng),
            reg: Linear::new(store, "box_head.reg", fc, 4, Init::Normal(0.001), rng),
            in_features: din,
        }
    }

    /// Pooled `(R, d, p, p)` patches to class logits `(R, 1)` and deltas `(R, 4)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, pooled: Var) -> Result<(Var, Var)> {
        let r = g.value(pooled).shape()[0];
        let x = g.reshape(pooled, &[r, self.in_features])?;
        let x = self.fc1.forward(g, store, x)?;
        let x = g.relu(x);
        let x = self.fc2.forward(g, store, x)?;
        let x = g.relu(x);
        Ok((self.cls.forward(g, store, x)?, self.reg.forward(g, store, x)?))
    }

    pub fn output_ids(&self) -> Vec<ParamId> {
        vec![self.cls.weight, self.cls.bias, self.reg.weight, self.reg.bias]
    }
}

/// Four 3×3 conv + ReLU layers, a 2×2 stride-2 transposed conv + ReLU, and a
/// 1×1 predictor: `(R, d, p, p)` patches to `(R, 1, 2p, 2p)` mask logits.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub convs: Vec<Conv2d>,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub predictor: Conv2d,
}

impl MaskHead {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, d: usize, n_convs: usize, rng: &mut R) -> Self {
        let convs = (0..n_convs)
            .map(|i| Conv2d::new(store, &format!("mask_head.conv{}", i + 1), d, d, 3, 1, true, Init::KaimingFanOut, rng))
            .collect();
        let std = (2.0 / (d * 4) as f64).sqrt();
        let w = Tensor::from_fn(&[d, d, 2, 2], |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        });
        let up_weight = store.add("mask_head.upsample.weight", w, true);
        let up_bias = store.add("mask_head.upsample.bias", Tensor::zeros(&[d]), true);
        let predictor = Conv2d::new(store, "mask_head.predictor", d, 1, 1, 1, true, Init::KaimingFanOut, rng);
        Self { convs, up_weight, up_bias, predictor }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, pooled: Var) -> Result<Var> {
        let mut x = pooled;
        for c in &self.convs {
            if g.value(x).dims4()?.1 != c.in_channels {
                return Err(LightError::shape(format!("mask head expects {} channels", c.in_channels)));
            }
            x = c.forward(g, store, x)?;
            x = g.relu(x);
        }
        let w = g.param(store, self.up_weight);
        let b = g.param(store, self.up_bias);
        x = g.conv_transpose_nonoverlap(x, w, b)?;
        x = g.relu(x);
        self.predictor.forward(g, store, x)
    }

    pub fn output_ids(&self) -> Vec<ParamId> {
        vec![self.predictor.weight, self.predictor.bias.expect("predictor has a bias")]
    }
}
