//! SGD with momentum, the step learning-rate schedule and gradient clipping.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter entry; untrainable entries keep an empty tensor.
    pub buffers: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = store
            .ids()
            .map(|id| if store.is_trainable(id) { Tensor::zeros(store.value(id).shape()) } else { Tensor::zeros(&[0]) })
            .collect();
        Self { momentum, weight_decay, buffers }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let buf = &mut self.buffers[id.0];
            let p = store.value_mut(*id);
            for ((v, p), &g) in buf.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *v = mu * *v + (g + wd * *p);
                *p -= lr * *v;
            }
        }
    }
}

/// Linear warmup from `warmup_factor · lr`, then ×`gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: usize, epoch: usize) -> f64 {
        let decay = self.gamma.powi(self.milestones.iter().filter(|&&m| epoch >= m).count() as i32);
        let warm = if step < self.warmup_steps {
            let a = step as f64 / self.warmup_steps as f64;
            self.warmup_factor * (1.0 - a) + a
        } else {
            1.0
        };
        self.base_lr * decay * warm
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule { base_lr: 0.02, warmup_steps: 10, warmup_factor: 0.001, milestones: vec![24, 33], gamma: 0.1 };
        assert!((s.lr(0, 0) - 0.02 * 0.001).abs() < 1e-12);
        assert_eq!(s.lr(10, 0), 0.02);
        assert!((s.lr(1000, 24) - 0.002).abs() < 1e-12);
        assert!((s.lr(1000, 35) - 0.0002).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![(ParamId(0), Tensor::from_vec(&[2], vec![30.0f32, 40.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        let n: f32 = g[0].1.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 10.0).abs() < 1e-4);
    }
}
