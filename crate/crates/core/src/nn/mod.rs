//! Parameter storage and the handful of layer types the network is built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{BnStatUpdate, Graph, Var};
use crate::error::{LightError, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Running statistics are stored here too, but never updated by the optimizer.
    pub trainable: bool,
}

/// Flat, ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {}", name);
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(LightError::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.value.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Folds batch statistics into the running estimates: `r ← (1−m)·r + m·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnStatUpdate<F>]) {
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
                for (r, &b) in self.entries[id.0].value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (F::one() - u.momentum) * *r + u.momentum * b;
                }
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with `fan_out`, for layers followed by ReLU.
    KaimingFanOut,
    Normal(f64),
    Zeros,
}

fn init_tensor<F: Scalar, R: Rng>(shape: &[usize], fan_out: usize, init: Init, rng: &mut R) -> Tensor<F> {
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::KaimingFanOut => (2.0 / fan_out as f64).sqrt(),
        Init::Normal(s) => s,
    };
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::of(z * std)
    })
}

/// Square-kernel convolution with "same" padding (`kernel / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_out = cout * kernel * kernel;
        let w = init_tensor(&[cout, cin, kernel, kernel], fan_out, init, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self {
            weight,
            bias,
            geom: ConvGeom { kernel, stride, pad: kernel / 2 },
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], F::one()), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Batch statistics when `train`, running statistics otherwise.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, train: bool) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if train {
            g.batch_norm_train(x, gamma, beta, F::of(self.eps), F::of(self.momentum), self.running_mean, self.running_var)
        } else {
            let (m, v) = (store.value(self.running_mean).clone(), store.value(self.running_var).clone());
            g.batch_norm_eval(x, gamma, beta, &m, &v, F::of(self.eps))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, init: Init, rng: &mut R) -> Self {
        let std = match init {
            Init::KaimingFanOut => Init::Normal((2.0 / din as f64).sqrt()),
            other => other,
        };
        let w = init_tensor(&[dout, din], din, std, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), true),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Conv → BN → ReLU, the basic unit of the backbone.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, false, Init::KaimingFanOut, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, train)?;
        Ok(g.relu(y))
    }
}
