//! Shared fixtures, reference implementations and gradient suites for the
//! integration tests and the acceptance run.
#![allow(dead_code)]

use light_core::autograd::{Graph, Var};
use light_core::gcti::{self, Gcti, GctiConfig, GateEncoder};
use light_core::gradcheck;
use light_core::height_branch::{HeightHead, Ppm, PpmConfig};
use light_core::nn::{Conv2d, Init, ParamId, ParamStore};
use light_core::tensor::Tensor;
use light_core::{BBox, BinaryMask, HeightMap, Instance, InstanceSet, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Fills every parameter with noise; running variances stay positive.
pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, std: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let var = store.name(id).ends_with("running_var");
        let t = store.value_mut(id);
        for v in t.data_mut() {
            *v = if var { rng.random_range(0.5..1.5) } else { std * { let z: f64 = StandardNormal.sample(rng); z } };
        }
    }
}

pub fn trainable(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.ids().filter(|&id| store.is_trainable(id)).collect()
}

/// `Σ r_i · v_i` with fixed, position-dependent weights so every output entry matters.
pub fn probe(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let r = g.input(Tensor::from_fn(&shape, |i| (0.37 * i as f64 + 1.0).sin()));
    let m = g.mul(v, r)?;
    Ok(g.sum_all(m))
}

pub fn probe_all(g: &mut Graph<f64>, vs: &[Var]) -> Result<Var> {
    let parts = vs.iter().map(|&v| probe(g, v)).collect::<Result<Vec<_>>>()?;
    g.add_n(&parts)
}

/// Worst relative error of one operation over all trials.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.worst < FD_TOL
    }
}

fn run_trials(op: &'static str, trials: usize, seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<GradResult> {
    let mut r = rng(seed);
    let mut worst = 0f64;
    for _ in 0..trials {
        worst = worst.max(trial(&mut r)?);
    }
    Ok(GradResult { op, trials, worst })
}

const D: usize = 8;
const S: usize = 5;

fn feature(r: &mut ChaCha8Rng) -> Tensor<f64> {
    normal_tensor(r, &[1, D, S, S], 1.0)
}

/// Finite-difference checks of every interaction operation on `1×8×5×5` inputs.
pub fn gcti_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradResult>> {
    let mut out = Vec::new();
    out.push(run_trials("align_source", trials, seed, |r| {
        let mut store = ParamStore::new();
        let rep = gradcheck::check(&mut store, &[], &[feature(r)], FD_STEP, |g, _, v| {
            let a = gcti::align_source(g, v[0], (3, 3))?;
            let b = gcti::align_source(g, v[0], (8, 8))?;
            probe_all(g, &[a, b])
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("gate_encode", trials, seed + 1, |r| {
        let mut store = ParamStore::new();
        let enc = GateEncoder::new(&mut store, "enc", D, 3, r);
        randomize(&mut store, r, 0.2);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r)], FD_STEP, |g, st, v| {
            let (fg, m) = gcti::gate_encode(g, st, &enc, v[0])?;
            probe_all(g, &[fg, m])
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("aggregate_sources", trials, seed + 2, |r| {
        let mut store = ParamStore::new();
        let mut inputs = Vec::new();
        for _ in 0..3 {
            inputs.push(uniform_tensor(r, &[1, D, S, S], 0.05, 0.95));
            inputs.push(feature(r));
        }
        let rep = gradcheck::check(&mut store, &[], &inputs, FD_STEP, |g, _, v| {
            let pairs: Vec<(Var, Var)> = v.chunks(2).map(|p| (p[0], p[1])).collect();
            let a = gcti::aggregate_sources(g, &pairs)?;
            probe(g, a)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("gated_fusion", trials, seed + 3, |r| {
        let mut store = ParamStore::new();
        let inputs = [feature(r), uniform_tensor(r, &[1, D, S, S], 0.05, 0.95), feature(r)];
        let rep = gradcheck::check(&mut store, &[], &inputs, FD_STEP, |g, _, v| {
            let f = gcti::gated_fusion(g, v[0], v[1], v[2])?;
            probe(g, f)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("interaction_output", trials, seed + 4, |r| {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "out", D, D, 3, 1, true, Init::Zeros, r);
        randomize(&mut store, r, 0.2);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r)], FD_STEP, |g, st, v| {
            let y = gcti::interaction_output(g, st, &conv, v[0])?;
            probe(g, y)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("apply_gcti", trials, seed + 5, |r| {
        let mut store = ParamStore::new();
        let m = Gcti::new(&mut store, &GctiConfig::default(), 1, D, r)?;
        randomize(&mut store, r, 0.15);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r), feature(r)], FD_STEP, |g, st, v| {
            let (enh, _) = gcti::apply_gcti(g, st, &m, v)?;
            probe_all(g, &enh)
        })?;
        Ok(rep.max_rel_error)
    })?);
    Ok(out)
}

/// Finite-difference checks of the height-branch operations on `1×8×5×5` inputs.
/// Pooling bins are `{1, 2, 3, 5}` since a 6-bin grid does not fit a 5×5 map.
pub fn height_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradResult>> {
    let bins = PpmConfig { bin_sizes: vec![1, 2, 3, 5] };
    let mut out = Vec::new();
    out.push(run_trials("adaptive_avg_pool", trials, seed, |r| {
        let mut store = ParamStore::new();
        let rep = gradcheck::check(&mut store, &[], &[feature(r)], FD_STEP, |g, _, v| {
            let ps = [1, 2, 3, 5].iter().map(|&b| g.adaptive_avg_pool(v[0], b)).collect::<Result<Vec<_>>>()?;
            probe_all(g, &ps)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("ppm_forward", trials, seed + 1, |r| {
        let mut store = ParamStore::new();
        let ppm = Ppm::new(&mut store, &bins, D, r)?;
        randomize(&mut store, r, 0.2);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r)], FD_STEP, |g, st, v| {
            let y = ppm.forward(g, st, v[0])?;
            probe(g, y)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("height_head", trials, seed + 2, |r| {
        let mut store = ParamStore::new();
        let head = HeightHead::new(&mut store, D, r);
        randomize(&mut store, r, 0.2);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r)], FD_STEP, |g, st, v| {
            let y = head.forward(g, st, v[0], false)?;
            probe(g, y)
        })?;
        Ok(rep.max_rel_error)
    })?);
    out.push(run_trials("ppm_and_head", trials, seed + 3, |r| {
        let mut store = ParamStore::new();
        let ppm = Ppm::new(&mut store, &bins, D, r)?;
        let head = HeightHead::new(&mut store, D, r);
        randomize(&mut store, r, 0.2);
        let ids = trainable(&store);
        let rep = gradcheck::check(&mut store, &ids, &[feature(r)], FD_STEP, |g, st, v| {
            let f = ppm.forward(g, st, v[0])?;
            let y = head.forward(g, st, f, false)?;
            probe(g, y)
        })?;
        Ok(rep.max_rel_error)
    })?);
    Ok(out)
}

/// `Σ_i M_i ⊙ F_i` by explicit element loops.
pub fn aggregate_oracle(pairs: &[(Tensor<f64>, Tensor<f64>)]) -> Vec<f64> {
    let n = pairs[0].0.len();
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for (m, f) in pairs {
            *o += m.data()[j] * f.data()[j];
        }
    }
    out
}

/// Half-pixel bilinear resize of one plane straight from the sampling formula.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (c.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let v = (1.0 - fy) * (1.0 - fx) * src[y0 * w + x0]
                + (1.0 - fy) * fx * src[y0 * w + x1]
                + fy * (1.0 - fx) * src[y1 * w + x0]
                + fy * fx * src[y1 * w + x1];
            out.push(v);
        }
    }
    out
}

pub fn box_iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS by repeated arg-max over the remaining boxes.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        for i in 0..boxes.len() {
            if alive[i] && box_iou_oracle(&boxes[b], &boxes[i]) >= thresh {
                alive[i] = false;
            }
        }
    }
    keep
}

pub fn mask_iou_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask AP at one IoU threshold: greedy matching in score order per image,
/// then for each of the 101 recall points the best precision at any rank
/// reaching that recall.
pub fn ap_oracle(preds: &[InstanceSet], gts: &[InstanceSet], thresh: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p.instances[b].score.total_cmp(&p.instances[a].score));
        let mut used = vec![false; g.len()];
        for (rank, &pi) in order.iter().enumerate() {
            let mut best = None;
            let mut best_iou = -1.0;
            for (gi, gt) in g.instances.iter().enumerate() {
                let iou = mask_iou_oracle(&p.instances[pi].mask, &gt.mask);
                if !used[gi] && iou >= thresh && iou > best_iou {
                    best = Some(gi);
                    best_iou = iou;
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
            }
            hits.push((p.instances[pi].score, img, rank, best.is_some()));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for h in &hits {
        if h.3 {
            tp += 1
        } else {
            fp += 1
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        let best = pr.iter().filter(|(rec, _)| *rec >= rt).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

/// δ_k percent by a per-pixel loop over ground truth above 1 m, predictions floored at 0.1 m.
pub fn delta_oracle(pred: &HeightMap, gt: &HeightMap, k: i32) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for i in 0..gt.values.len() {
        let g = gt.values[i];
        if g <= 1.0 {
            continue;
        }
        let p = if pred.values[i] < 0.1 { 0.1f32 } else { pred.values[i] };
        let (p, g) = (p as f64, g as f64);
        n += 1;
        let r = if p > g { p / g } else { g / p };
        if r < 1.25f64.powi(k) {
            ok += 1;
        }
    }
    (n > 0).then(|| 100.0 * ok as f64 / n as f64)
}

pub fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(x, y, true);
        }
    }
    m
}

pub fn rect_instance(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize, score: f64) -> Instance {
    Instance {
        bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
        mask: rect_mask(w, h, x0, y0, x1, y1),
        score,
        height_m: None,
    }
}

fn random_rect<R: Rng>(r: &mut R, size: usize) -> (usize, usize, usize, usize) {
    let x0 = r.random_range(0..size - 2);
    let y0 = r.random_range(0..size - 2);
    let x1 = r.random_range(x0 + 1..=size.min(x0 + 9));
    let y1 = r.random_range(y0 + 1..=size.min(y0 + 9));
    (x0, y0, x1, y1)
}

/// A few small images with rectangle ground truth and noisy scored predictions
/// (jittered copies of the ground truth plus spurious boxes).
pub fn random_ap_case<R: Rng>(r: &mut R) -> (Vec<InstanceSet>, Vec<InstanceSet>) {
    const SIZE: usize = 16;
    let n_images = r.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_images {
        let mut gt = InstanceSet::empty(SIZE, SIZE);
        let mut pred = InstanceSet::empty(SIZE, SIZE);
        for _ in 0..r.random_range(0..=4) {
            let (x0, y0, x1, y1) = random_rect(r, SIZE);
            gt.instances.push(rect_instance(SIZE, SIZE, x0, y0, x1, y1, 1.0));
            if r.random_bool(0.8) {
                let j = |v: usize, r: &mut R| (v as i64 + r.random_range(-1..=1)).clamp(0, SIZE as i64) as usize;
                let (a, b) = (j(x0, r), j(y0, r));
                let (c, d) = (j(x1, r).max(a + 1).min(SIZE), j(y1, r).max(b + 1).min(SIZE));
                pred.instances.push(rect_instance(SIZE, SIZE, a, b, c, d, r.random_range(0.0..1.0)));
            }
        }
        for _ in 0..r.random_range(0..=2) {
            let (x0, y0, x1, y1) = random_rect(r, SIZE);
            pred.instances.push(rect_instance(SIZE, SIZE, x0, y0, x1, y1, r.random_range(0.0..1.0)));
        }
        pred.sort_by_score();
        preds.push(pred);
        gts.push(gt);
    }
    (preds, gts)
}

pub fn random_height_pair<R: Rng>(r: &mut R, n: usize) -> (HeightMap, HeightMap) {
    let mut gt = HeightMap::zeros(n, n);
    let mut pred = HeightMap::zeros(n, n);
    for i in 0..n * n {
        gt.values[i] = if r.random_bool(0.3) { 0.0 } else { r.random_range(0.5..60.0) };
        pred.values[i] = gt.values[i] * r.random_range(0.3..2.5f32) + r.random_range(-0.5..0.5f32);
    }
    (pred, gt)
}

/// Random boxes and scores for NMS tests.
pub fn random_boxes<R: Rng>(r: &mut R, n: usize, size: f64) -> (Vec<BBox>, Vec<f64>) {
    let boxes = (0..n)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..size * 0.8), r.random_range(0.0..size * 0.8));
            let (w, h) = (r.random_range(2.0..size * 0.3), r.random_range(2.0..size * 0.3));
            BBox::new(x, y, x + w, y + h)
        })
        .collect();
    let scores = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    (boxes, scores)
}
