//! Shared fixtures for the benchmarks.

use light_core::engine::TrainConfig;
use light_core::model::{LightNet, Mode};
use light_core::nn::ParamStore;
use light_core::synthdata::generate_scene;
use light_core::tensor::Tensor;
use light_core::{BBox, ImageTile, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Randomly placed boxes inside a `size`×`size` image with uniform scores.
pub fn random_boxes(r: &mut ChaCha8Rng, n: usize, size: f64) -> (Vec<BBox>, Vec<f64>) {
    let boxes = (0..n)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..size - 8.0), r.random_range(0.0..size - 8.0));
            let (w, h) = (r.random_range(4.0..size / 3.0), r.random_range(4.0..size / 3.0));
            BBox::new(x, y, (x + w).min(size), (y + h).min(size))
        })
        .collect();
    let scores = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    (boxes, scores)
}

/// Freshly initialized desk-scale network.
pub fn desk_model(mode: Mode) -> (LightNet, ParamStore<f32>, TrainConfig) {
    let cfg = TrainConfig::desk(mode, 0);
    let mut store = ParamStore::new();
    let net = LightNet::new(&mut store, mode, &cfg.model, cfg.seed).expect("desk config is valid");
    (net, store, cfg)
}

pub fn desk_image() -> ImageTile {
    generate_scene(&SceneSpec::desk(1), 0).expect("desk spec is valid").image
}
