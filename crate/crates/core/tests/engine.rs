use std::path::Path;

use light_core::engine::*;
use light_core::metrics::{map_metric, IouKind};
use light_core::model::{LightNet, Mode};
use light_core::nn::{ParamId, ParamStore};
use light_core::synthdata::{write_dataset_split, Dataset, LoadedSample, SceneSpec};
use light_core::tensor::Tensor;
use light_core::{io, ImageTile};

fn tiny(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { mode, seed, image_size: 64, epochs: 1, warmup_steps: 2, lr: 0.01, ..TrainConfig::default() };
    cfg.lr_steps = vec![];
    let m = &mut cfg.model;
    m.backbone.depth = [1, 1, 1, 1];
    m.backbone.width = 4;
    m.backbone.fpn_channels = 8;
    m.instance.anchor_scales = vec![8.0, 16.0, 32.0, 64.0];
    m.instance.fc_dim = 16;
    m.instance.pre_nms = 100;
    m.instance.post_nms = 32;
    m.instance.rpn_batch = 64;
    m.instance.roi_batch = 16;
    m.instance.max_mask_rois = 4;
    cfg
}

fn scene_spec() -> SceneSpec {
    SceneSpec { image_size: 64, n_buildings_range: [1, 3], footprint_range: [10, 24], seed: 11, ..SceneSpec::default() }
}

fn dataset(dir: &Path, n: usize, n_val: usize) -> (Vec<LoadedSample>, Vec<LoadedSample>, f64) {
    write_dataset_split(&scene_spec(), n, n_val, dir).unwrap();
    let ds = Dataset::open(dir).unwrap();
    (ds.load_split("train").unwrap(), ds.load_split("val").unwrap(), ds.manifest.h_max)
}

#[test]
fn sgd_step_by_hand() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
    let s = store.add("s", Tensor::from_vec(&[1], vec![5.0]).unwrap(), false);
    let mut opt = Sgd::new(&store, 0.9, 0.1);
    let g = |a: f32, b: f32| vec![(w, Tensor::from_vec(&[2], vec![a, b]).unwrap()), (s, Tensor::from_vec(&[1], vec![1.0]).unwrap())];
    opt.step(&mut store, &g(0.5, 1.0), 0.1);
    // v = g + 0.1 p = [0.6, 0.8]; p = [0.94, -2.08]
    let p1 = store.value(w).data().to_vec();
    assert!((p1[0] - 0.94).abs() < 1e-6 && (p1[1] + 2.08).abs() < 1e-6);
    opt.step(&mut store, &g(0.0, 0.0), 0.1);
    // v = 0.9 v + 0.1 p = [0.634, 0.512]
    let p2 = store.value(w).data().to_vec();
    assert!((p2[0] - (0.94 - 0.0634)).abs() < 1e-6 && (p2[1] - (-2.08 - 0.0512)).abs() < 1e-6);
    assert_eq!(store.value(s).data(), &[5.0]);
}

#[test]
fn clipping_bounds_the_norm() {
    let mut g = vec![(ParamId(0), Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap())];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].1.data(), &[3.0, 4.0]);
    clip_grad_norm(&mut g, 1.0);
    let n = g[0].1.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-5);
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.momentum, c.weight_decay, c.epochs, c.batch_size, c.lr, c.image_size), (0.9, 1e-4, 36, 2, 0.02, 512));
    assert_eq!(c.mode, Mode::JointGcti);
    assert_eq!(TrainConfig::from_json("{}").unwrap(), c);
}

#[test]
fn bad_configs_are_config_errors() {
    for text in [r#"{"lr": -1}"#, r#"{"batch_size": 0}"#, r#"{"learning_rate": 0.1}"#, r#"{"mode": "both"}"#, "not json", r#"{"image_size": 100}"#] {
        let e = TrainConfig::from_json(text).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{text}");
    }
}

#[test]
fn flips_are_involutions() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, _) = dataset(dir.path(), 2, 0);
    let s = &train[0];
    for (h, v) in [(true, false), (false, true), (true, true)] {
        let (img, inst, hm) = flip_sample(s, h, v);
        let once = LoadedSample { name: s.name.clone(), image: img, instances: inst, height: hm };
        let (img2, inst2, hm2) = flip_sample(&once, h, v);
        assert_eq!((img2, inst2, hm2), (s.image.clone(), s.instances.clone(), s.height.clone()));
        assert_ne!(once.height, s.height);
    }
}

#[test]
fn zero_learning_rate_keeps_trainable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, h_max) = dataset(&dir.path().join("data"), 4, 1);
    let cfg = TrainConfig { lr: 0.0, ..tiny(Mode::JointGcti, 3) };
    let out = dir.path().join("run");
    train_samples(&cfg, &train, &val, h_max, Some(&out)).unwrap();
    let ck = Checkpoint::load(&out.join("last.ckpt")).unwrap();
    let mut fresh = ParamStore::<f32>::new();
    LightNet::new(&mut fresh, cfg.mode, &cfg.model, cfg.seed).unwrap();
    for id in fresh.ids() {
        if fresh.is_trainable(id) {
            assert_eq!(fresh.value(id), ck.store.value(id), "{}", fresh.name(id));
        }
    }
}

#[test]
fn identical_seeds_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, h_max) = dataset(dir.path(), 6, 2);
    let cfg = tiny(Mode::JointGcti, 5);
    let a = train_samples(&cfg, &train, &val, h_max, None).unwrap();
    let b = train_samples(&cfg, &train, &val, h_max, None).unwrap();
    assert_eq!(a.log.len(), 2);
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_metrics, b.final_metrics);
    let c = train_samples(&TrainConfig { seed: 6, ..cfg }, &train, &val, h_max, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn empty_training_split_is_a_data_error() {
    let cfg = tiny(Mode::Joint, 0);
    assert_eq!(train_samples(&cfg, &[], &[], 100.0, None).unwrap_err().exit_code(), 3);
}

#[test]
fn wrong_image_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, h_max) = dataset(dir.path(), 2, 0);
    let cfg = TrainConfig { image_size: 96, ..tiny(Mode::Joint, 0) };
    assert_eq!(train_samples(&cfg, &train, &val, h_max, None).unwrap_err().exit_code(), 2);
}

/// One short run shared by the checkpoint, eval, infer and bench tests.
fn trained(dir: &Path, mode: Mode) -> std::path::PathBuf {
    let data = dir.join("data");
    dataset(&data, 4, 2);
    let out = dir.join("run");
    train(&tiny(mode, 1), &data, &out).unwrap();
    out
}

#[test]
fn run_directory_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), Mode::JointGcti);
    for f in ["config.json", "train_log.jsonl", "best.ckpt", "last.ckpt", "metrics.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    for l in lines.lines() {
        let _: StepLog = serde_json::from_str(l).unwrap();
    }

    let bytes = std::fs::read(out.join("last.ckpt")).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    let again = dir.path().join("again.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let data = dir.path().join("data");
    let a = evaluate(&out.join("last.ckpt"), &data, "val").unwrap();
    let b = evaluate(&again, &data, "val").unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.dataset.sha256, b.dataset.sha256);
    assert_eq!(a.dataset.n_images, 2);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err().exit_code(), 3);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(evaluate(&out.join("last.ckpt"), &data, "test").is_err());
}

#[test]
fn ground_truth_scores_perfect_and_empty_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, _) = dataset(dir.path(), 5, 0);
    let gts: Vec<_> = train.iter().map(|s| s.instances.clone()).collect();
    let s = map_metric(&gts, &gts, IouKind::Mask).unwrap();
    assert_eq!((s.map, s.ap50), (Some(100.0), Some(100.0)));
    let empty: Vec<_> = gts.iter().map(|g| light_core::InstanceSet::empty(g.width, g.height)).collect();
    let s = map_metric(&empty, &gts, IouKind::Mask).unwrap();
    assert_eq!((s.map, s.ap50), (Some(0.0), Some(0.0)));
}

#[test]
fn infer_is_repeatable_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), Mode::JointGcti);
    let img = dir.path().join("data").join(light_core::synthdata::sample_name(0)).join("image.png");
    let a = infer(&out.join("best.ckpt"), &img, &dir.path().join("p1")).unwrap();
    let b = infer(&out.join("best.ckpt"), &img, &dir.path().join("p2")).unwrap();
    assert_eq!(a.instances, b.instances);
    assert_eq!(a.height, b.height);
    assert_eq!(a.files.len(), 4);
    for (fa, fb) in a.files.iter().zip(&b.files) {
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
    }
    let h = a.height.unwrap();
    assert_eq!(io::read_grid(&dir.path().join("p1/height.grid")).unwrap(), h);
    assert!(h.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    let back = io::read_instances(&dir.path().join("p1/instances.json"), 64, 64).unwrap();
    assert_eq!(back.len(), a.instances.unwrap().len());

    // A building-free image of another size is resized and still predicted.
    let blank = dir.path().join("blank.png");
    io::write_image(&blank, &ImageTile::filled(80, 48, [0.2, 0.24, 0.18])).unwrap();
    let c = infer(&out.join("best.ckpt"), &blank, &dir.path().join("p3")).unwrap();
    assert_eq!((c.height.as_ref().unwrap().rows, c.height.as_ref().unwrap().cols), (64, 64));
}

#[test]
fn single_branch_checkpoints_write_their_outputs_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), Mode::HeightOnly);
    let img = dir.path().join("data").join(light_core::synthdata::sample_name(1)).join("image.png");
    let p = infer(&out.join("last.ckpt"), &img, &dir.path().join("p")).unwrap();
    assert!(p.instances.is_none() && p.height.is_some());
    assert_eq!(p.files.len(), 2);
    let r = evaluate(&out.join("last.ckpt"), &dir.path().join("data"), "val").unwrap();
    assert!(r.metrics.ap50.is_none() && r.metrics.delta1.is_some());
}

#[test]
fn bench_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), Mode::Joint);
    let r = bench(&out.join("last.ckpt"), 1).unwrap();
    assert_eq!(r.model.samples_ms.len(), 1);
    assert_eq!(r.model.mean_ms, r.model.median_ms);
    assert!(r.seg_only.is_some() && r.height_only.is_some() && r.ratio.is_some());
    let text = serde_json::to_string(&r).unwrap();
    let back: BenchReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
    assert_eq!(bench(&out.join("last.ckpt"), 0).unwrap_err().exit_code(), 2);
}

#[test]
fn timing_statistics() {
    let t = Timing::from_samples(vec![4.0, 1.0, 3.0, 2.0]);
    assert_eq!((t.mean_ms, t.median_ms), (2.5, 2.5));
    let t = Timing::from_samples(vec![5.0, 1.0, 9.0]);
    assert_eq!((t.mean_ms, t.median_ms), (5.0, 5.0));
}

#[test]
fn resize_keeps_constants() {
    let img = ImageTile::filled(30, 20, [0.25, 0.5, 0.75]);
    let r = resize_image(&img, 64, 64).unwrap();
    assert!(r.data.chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
}
