use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{instance_overlay, height_overlay, Checkpoint, Sgd, TrainConfig};
use crate::autograd::Graph;
use crate::data::{batch_tensor, BBox, BinaryMask, HeightMap, ImageTile, Instance, InstanceSet};
use crate::error::{LightError, Result};
use crate::io;
use crate::losses::LossReport;
use crate::metrics::MetricsReport;
use crate::model::{Branches, LightNet, Mode, Prediction, Target};
use crate::nn::ParamStore;
use crate::synthdata::{generate_scene, Dataset, LoadedSample, SceneSpec};
use crate::tensor::kernels::bilinear_resize_forward;
use crate::tensor::Tensor;

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub rpn_positives: usize,
    pub roi_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub log: Vec<StepLog>,
    /// Validation metrics after the last epoch.
    pub final_metrics: MetricsReport,
    pub best_metrics: MetricsReport,
    pub best_epoch: usize,
    pub seconds: f64,
}

fn flip_mask(m: &BinaryMask, h: bool, v: bool) -> BinaryMask {
    let mut out = BinaryMask::empty(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let (sx, sy) = (if h { m.width - 1 - x } else { x }, if v { m.height - 1 - y } else { y });
            out.data[y * m.width + x] = m.data[sy * m.width + sx];
        }
    }
    out
}

/// Mirrors a sample horizontally and/or vertically.
pub fn flip_sample(s: &LoadedSample, h: bool, v: bool) -> (ImageTile, InstanceSet, HeightMap) {
    let (w, ht) = (s.image.width, s.image.height);
    let src = |x: usize, y: usize| (if h { w - 1 - x } else { x }, if v { ht - 1 - y } else { y });
    let mut image = s.image.clone();
    let mut height = s.height.clone();
    for y in 0..ht {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            image.set_pixel(x, y, s.image.pixel(sx, sy));
            height.values[y * w + x] = s.height.at(sx, sy);
        }
    }
    let instances = s
        .instances
        .instances
        .iter()
        .map(|i| {
            let b = i.bbox;
            let (x1, x2) = if h { (w as f64 - b.x2, w as f64 - b.x1) } else { (b.x1, b.x2) };
            let (y1, y2) = if v { (ht as f64 - b.y2, ht as f64 - b.y1) } else { (b.y1, b.y2) };
            Instance { bbox: BBox::new(x1, y1, x2, y2), mask: flip_mask(&i.mask, h, v), ..i.clone() }
        })
        .collect();
    (image, InstanceSet { width: w, height: ht, instances }, height)
}

/// Bilinear resize of an image.
pub fn resize_image(img: &ImageTile, width: usize, height: usize) -> Result<ImageTile> {
    if (img.width, img.height) == (width, height) {
        return Ok(img.clone());
    }
    let hw = img.width * img.height;
    let mut chw = vec![0f64; 3 * hw];
    for (p, px) in img.data.chunks(3).enumerate() {
        for c in 0..3 {
            chw[c * hw + p] = px[c] as f64;
        }
    }
    let t = Tensor::from_vec(&[1, 3, img.height, img.width], chw)?;
    let r = bilinear_resize_forward(&t, height, width)?;
    let n = width * height;
    let data = (0..n).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| r.data()[c * n + p] as f32).collect();
    ImageTile::new(width, height, data)
}

fn check_sizes(samples: &[LoadedSample], size: usize) -> Result<()> {
    for s in samples {
        if s.image.width != size || s.image.height != size {
            return Err(LightError::config(
                "image_size",
                format!("{} is {}x{}, config expects {}x{}", s.name, s.image.width, s.image.height, size, size),
            ));
        }
    }
    Ok(())
}

/// Runs inference over `samples` and scores it against their ground truth.
pub fn evaluate_samples(
    net: &LightNet,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    h_max: f64,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    const BATCH: usize = 4;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(BATCH) {
        let imgs: Vec<&ImageTile> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(net.predict(store, &imgs, h_max, net.mode.into())?);
    }
    let report = score(net.mode, samples, &preds)?;
    Ok((report, preds))
}

fn score(mode: Mode, samples: &[LoadedSample], preds: &[Prediction]) -> Result<MetricsReport> {
    let gt_inst: Vec<InstanceSet> = samples.iter().map(|s| s.instances.clone()).collect();
    let gt_h: Vec<HeightMap> = samples.iter().map(|s| s.height.clone()).collect();
    let p_inst: Vec<InstanceSet> = preds.iter().filter_map(|p| p.instances.clone()).collect();
    let p_h: Vec<HeightMap> = preds.iter().filter_map(|p| p.height.clone()).collect();
    MetricsReport::compute(
        mode.has_instances().then_some((p_inst.as_slice(), gt_inst.as_slice())),
        mode.has_height().then_some((p_h.as_slice(), gt_h.as_slice())),
        samples.len(),
    )
}

/// Mean of the available AP50 and δ1, used to pick the best checkpoint.
fn selection_score(m: &MetricsReport) -> f64 {
    let v: Vec<f64> = [m.ap50, m.delta1].into_iter().flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains on the dataset at `data` and writes checkpoints, the step log and
/// final validation metrics into `out`.
pub fn train(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let train = ds.load_split("train")?;
    let val = ds.load_split("val")?;
    train_samples(cfg, &train, &val, ds.manifest.h_max, Some(out))
}

/// Training on samples already in memory; `out` is optional.
pub fn train_samples(
    cfg: &TrainConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    h_max: f64,
    out: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(LightError::data("training split is empty"));
    }
    check_sizes(train, cfg.image_size)?;
    check_sizes(val, cfg.image_size)?;
    let started = Instant::now();
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| LightError::io(dir, e))?;
            io::write_json(&dir.join("config.json"), cfg)?;
            let p = dir.join("train_log.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| LightError::io(&p, e))?))
        }
        None => None,
    };

    let mut store = ParamStore::<f32>::new();
    let net = LightNet::new(&mut store, cfg.mode, &cfg.model, cfg.seed)?;
    let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let sched = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7472_6169_6e);
    log::info!("training {} ({} tensors, {} weights) on {} samples", cfg.mode, store.len(), store.num_scalars(), train.len());

    let mut log = Vec::new();
    let mut step = 0;
    let mut best: Option<(f64, usize, MetricsReport)> = None;
    let mut last_metrics = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(ImageTile, InstanceSet, Vec<f32>)> = chunk
                .iter()
                .map(|&i| {
                    let (fh, fv) = if cfg.augment_flips { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
                    let (img, inst, h) = flip_sample(&train[i], fh, fv);
                    h.normalized(h_max).map(|hn| (img, inst, hn))
                })
                .collect::<Result<_>>()?;
            let imgs: Vec<&ImageTile> = batch.iter().map(|b| &b.0).collect();
            let targets: Vec<Target> = batch.iter().map(|b| Target { instances: &b.1, height_norm: &b.2 }).collect();
            let lr = sched.lr(step, epoch);
            let mut g = Graph::<f32>::new();
            let sl = net.loss(&mut g, &store, batch_tensor(&imgs)?, &targets, &cfg.loss_weights, step, &mut rng);
            let sl = match sl {
                Ok(s) => s,
                Err(e) => return Err(abort(e, cfg, h_max, epoch, step, &store, &opt, out)),
            };
            let mut grads = g.backward(sl.total).into_params();
            if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
                let e = LightError::NonFinite { part: format!("gradient of {}", store.name(*id)), step, value: f64::NAN };
                return Err(abort(e, cfg, h_max, epoch, step, &store, &opt, out));
            }
            let grad_norm = match cfg.clip_grad_norm {
                Some(c) => super::clip_grad_norm(&mut grads, c),
                None => super::clip_grad_norm(&mut grads, f64::INFINITY),
            };
            opt.step(&mut store, &grads, lr);
            store.apply_bn_updates(&g.take_bn_updates());
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss: sl.report,
                grad_norm,
                rpn_positives: sl.stats.rpn_positives,
                roi_positives: sl.stats.roi_positives,
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).map_err(|e| LightError::data(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| LightError::io(out.expect("log implies out").join("train_log.jsonl"), e))?;
            }
            if step % 50 == 0 {
                log::info!(
                    "epoch {} step {} lr {:.5} total {:.4} (det {:.4} mask {:.4} height {:.4})",
                    epoch,
                    step,
                    lr,
                    entry.loss.total,
                    entry.loss.det,
                    entry.loss.mask,
                    entry.loss.height
                );
            }
            log.push(entry);
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if !val.is_empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) {
            let (m, _) = evaluate_samples(&net, &store, val, h_max)?;
            log::info!("epoch {} val AP50 {:?} mAP {:?} delta1 {:?}", epoch, m.ap50, m.map, m.delta1);
            let s = selection_score(&m);
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, epoch, m.clone()));
                if let Some(dir) = out {
                    Checkpoint::new(cfg, h_max, epoch + 1, step, Some(m.clone()), &store, Some(&opt)).save(&dir.join("best.ckpt"))?;
                }
            }
            last_metrics = Some(m);
        }
        if let Some(f) = log_file.as_mut() {
            f.flush().map_err(|e| LightError::io(out.expect("log implies out"), e))?;
        }
    }
    let final_metrics = match last_metrics {
        Some(m) => m,
        None => MetricsReport::compute(None, None, 0)?,
    };
    let (_, best_epoch, best_metrics) = best.unwrap_or((0.0, cfg.epochs - 1, final_metrics.clone()));
    if let Some(dir) = out {
        let ck = Checkpoint::new(cfg, h_max, cfg.epochs, step, Some(final_metrics.clone()), &store, Some(&opt));
        ck.save(&dir.join("last.ckpt"))?;
        if !dir.join("best.ckpt").exists() {
            ck.save(&dir.join("best.ckpt"))?;
        }
        io::write_json(&dir.join("metrics.json"), &final_metrics)?;
    }
    Ok(TrainSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        steps: step,
        log,
        final_metrics,
        best_metrics,
        best_epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Saves the last good state next to a numerical failure and passes the error on.
#[allow(clippy::too_many_arguments)]
fn abort(
    e: LightError,
    cfg: &TrainConfig,
    h_max: f64,
    epoch: usize,
    step: usize,
    store: &ParamStore<f32>,
    opt: &Sgd,
    out: Option<&Path>,
) -> LightError {
    if let (LightError::NonFinite { .. }, Some(dir)) = (&e, out) {
        let path = dir.join("last_good.ckpt");
        match Checkpoint::new(cfg, h_max, epoch, step, None, store, Some(opt)).save(&path) {
            Ok(()) => log::error!("{e}; last good state saved to {}", path.display()),
            Err(se) => log::error!("{e}; saving the last good state failed: {se}"),
        }
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub root: PathBuf,
    pub split: String,
    pub n_images: usize,
    /// SHA-256 over the split's image, height and instance files in manifest order.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub mode: Mode,
    pub checkpoint: PathBuf,
    pub dataset: DatasetInfo,
    pub config: TrainConfig,
}

fn split_digest(ds: &Dataset, split: &str) -> Result<String> {
    let mut h = Sha256::new();
    for name in ds.manifest.split(split)? {
        for f in ["image.png", "height.grid", "instances.json"] {
            h.update(io::read_bytes(&ds.root.join(name).join(f))?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Scores a checkpoint on one split of a dataset.
pub fn evaluate(ckpt: &Path, data: &Path, split: &str) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (net, store) = ck.model()?;
    let ds = Dataset::open(data)?;
    let samples = ds.load_split(split)?;
    check_sizes(&samples, ck.header.config.image_size)?;
    let (metrics, _) = evaluate_samples(&net, &store, &samples, ds.manifest.h_max)?;
    Ok(EvalReport {
        metrics,
        mode: net.mode,
        checkpoint: ckpt.to_path_buf(),
        dataset: DatasetInfo { root: data.to_path_buf(), split: split.to_string(), n_images: samples.len(), sha256: split_digest(&ds, split)? },
        config: ck.header.config,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub instances: Option<InstanceSet>,
    pub height: Option<HeightMap>,
    pub files: Vec<PathBuf>,
}

/// Predicts one image and writes `instances.json`, `height.grid`,
/// `instances.png` and `height.png` (for the branches the model has).
pub fn infer(ckpt: &Path, image: &Path, out: &Path) -> Result<InferOutput> {
    let ck = Checkpoint::load(ckpt)?;
    let (net, store) = ck.model()?;
    let raw = io::read_image(image)?;
    let size = ck.header.config.image_size;
    let img = resize_image(&raw, size, size)?;
    let pred = net.predict(&store, &[&img], ck.header.h_max, net.mode.into())?.remove(0);
    std::fs::create_dir_all(out).map_err(|e| LightError::io(out, e))?;
    let mut files = Vec::new();
    if let Some(set) = &pred.instances {
        let p = out.join("instances.json");
        io::write_instances(&p, set, true)?;
        files.push(p);
        let p = out.join("instances.png");
        io::write_image(&p, &instance_overlay(&img, set))?;
        files.push(p);
    }
    if let Some(h) = &pred.height {
        let p = out.join("height.grid");
        io::write_grid(&p, h)?;
        files.push(p);
        let p = out.join("height.png");
        io::write_image(&p, &height_overlay(h, ck.header.h_max))?;
        files.push(p);
    }
    Ok(InferOutput { instances: pred.instances, height: pred.height, files })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let mut s = samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let mean_ms = if n == 0 { 0.0 } else { s.iter().sum::<f64>() / n as f64 };
        Self { mean_ms, median_ms, samples_ms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub image_size: usize,
    pub n: usize,
    pub warmup: usize,
    /// The checkpoint's own forward pass.
    pub model: Timing,
    /// The same weights with only the instance branch.
    pub seg_only: Option<Timing>,
    /// The same weights with only the height branch.
    pub height_only: Option<Timing>,
    /// `model.mean / (seg_only.mean + height_only.mean)`.
    pub ratio: Option<f64>,
    pub joint_faster: Option<bool>,
}

pub const BENCH_WARMUP: usize = 5;

/// Per-image forward latency of a checkpoint on synthetic scenes, next to the
/// single-branch passes of the same weights. Runs are interleaved per image.
pub fn bench(ckpt: &Path, n: usize) -> Result<BenchReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (net, store) = ck.model()?;
    bench_model(&net, &store, ck.header.config.image_size, ck.header.h_max, n)
}

pub fn bench_model(net: &LightNet, store: &ParamStore<f32>, image_size: usize, h_max: f64, n: usize) -> Result<BenchReport> {
    if n == 0 {
        return Err(LightError::config("n", "need at least one timed image"));
    }
    let spec = SceneSpec { image_size, seed: 0xbe9c, ..SceneSpec::desk(0xbe9c) };
    let spec = SceneSpec { footprint_range: scaled_footprint(image_size), ..spec };
    let mut variants: Vec<Branches> = vec![net.mode.into()];
    let both = net.mode.has_instances() && net.mode.has_height();
    if both {
        variants.push(Branches { instances: true, height: false, gcti: false });
        variants.push(Branches { instances: false, height: true, gcti: false });
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for i in 0..BENCH_WARMUP + n {
        let img = generate_scene(&spec, i as u64)?.image;
        for (k, br) in variants.iter().enumerate() {
            let t = Instant::now();
            net.predict(store, &[&img], h_max, *br)?;
            if i >= BENCH_WARMUP {
                samples[k].push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let mut timings = samples.into_iter().map(Timing::from_samples);
    let model = timings.next().expect("model variant");
    let seg_only = timings.next();
    let height_only = timings.next();
    let ratio = match (&seg_only, &height_only) {
        (Some(s), Some(h)) => Some(model.mean_ms / (s.mean_ms + h.mean_ms)),
        _ => None,
    };
    Ok(BenchReport {
        mode: net.mode,
        image_size,
        n,
        warmup: BENCH_WARMUP,
        model,
        seg_only,
        height_only,
        joint_faster: ratio.map(|r| r < 1.0),
        ratio,
    })
}

fn scaled_footprint(size: usize) -> [usize; 2] {
    let d = SceneSpec::desk(0);
    let f = |v: usize| (v * size / d.image_size).max(2);
    [f(d.footprint_range[0]), f(d.footprint_range[1]).min(size / 2)]
}
