mod common;

use common::*;
use light_core::autograd::{Graph, Var};
use light_core::gradcheck;
use light_core::instance::*;
use light_core::nn::ParamStore;
use light_core::tensor::kernels::{RoiRef, SamplingRatio};
use light_core::tensor::Tensor;
use light_core::BBox;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn anchor_count_at_512() {
    let hw = [(128, 128), (64, 64), (32, 32), (16, 16)];
    let a = generate_anchors(&hw, &[4, 8, 16, 32], &[32.0, 64.0, 128.0, 256.0], &[0.5, 1.0, 2.0]);
    let per: Vec<usize> = a.iter().map(|l| l.len()).collect();
    assert_eq!(per, vec![128 * 128 * 3, 64 * 64 * 3, 32 * 32 * 3, 16 * 16 * 3]);
    assert_eq!(per.iter().sum::<usize>(), 65_280);
}

#[test]
fn ratio_variants_share_area() {
    let a = generate_anchors(&[(2, 2)], &[4], &[32.0], &[0.5, 1.0, 2.0]);
    for cell in a[0].chunks(3) {
        let areas: Vec<f64> = cell.iter().map(|x| x.width * x.height).collect();
        for v in &areas {
            assert!((v - 1024.0).abs() < 1e-9, "{areas:?}");
        }
        assert!((cell[0].height / cell[0].width - 0.5).abs() < 1e-12);
    }
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (boxes, scores) = random_boxes(&mut r, 50, 64.0);
        for t in [0.3, 0.5, 0.7] {
            assert_eq!(nms(&boxes, &scores, t), nms_oracle(&boxes, &scores, t));
        }
    }
}

#[test]
fn postprocess_survivors_match_oracle() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (boxes, scores) = random_boxes(&mut r, 40, 48.0);
        let dets: Vec<RawDetection> =
            boxes.iter().zip(&scores).map(|(b, s)| RawDetection { bbox: *b, score: *s, mask_probs: vec![1.0; 4] }).collect();
        let set = postprocess(&dets, 2, 0.05, 0.5, 100, 48, 48);
        let kept: Vec<usize> = (0..40).filter(|&i| scores[i] >= 0.05).collect();
        let kb: Vec<BBox> = kept.iter().map(|&i| boxes[i]).collect();
        let ks: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        let want: Vec<BBox> = nms_oracle(&kb, &ks, 0.5).into_iter().map(|k| kb[k]).collect();
        let got: Vec<BBox> = set.instances.iter().map(|i| i.bbox).collect();
        assert_eq!(got, want);
    }
}

fn branch(store: &mut ParamStore<f64>, d: usize, seed: u64) -> InstanceBranch {
    let cfg = InstanceConfig {
        anchor_scales: vec![8.0, 16.0],
        fc_dim: 16,
        mask_convs: 1,
        box_pool: 3,
        mask_pool: 4,
        ..InstanceConfig::default()
    };
    InstanceBranch::new(store, &cfg, 2, d, &mut rng(seed)).unwrap()
}

#[test]
fn one_anchor_is_its_own_proposal() {
    let mut store = ParamStore::new();
    let b = branch(&mut store, 4, 3);
    let anchor = Anchor { cx: 10.0, cy: 12.0, width: 8.0, height: 6.0, level: 0 };
    let p = b.select_proposals(&[0.3], &[[0.0; 4]], &[anchor], 64, 64);
    assert_eq!(p.boxes, vec![anchor.bbox()]);
}

#[test]
fn zero_heads_propose_clipped_anchors() {
    let mut store = ParamStore::<f64>::new();
    let b = branch(&mut store, 4, 4);
    for id in b.rpn.output_ids() {
        let z = Tensor::zeros(store.value(id).shape());
        store.set(id, z).unwrap();
    }
    let mut g = Graph::new();
    let levels: Vec<Var> = [(8, 8), (4, 4)].iter().map(|&(h, w)| g.input(normal_tensor(&mut rng(5), &[1, 4, h, w], 1.0))).collect();
    let out = b.rpn_forward(&mut g, &store, &levels).unwrap();
    for (l, &(h, w)) in out.level_hw.iter().enumerate() {
        assert!(g.value(out.objectness[l]).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.deltas[l]).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out.objectness[l]).len(), h * w * 3);
    }
    let anchors: Vec<BBox> = b.anchors(&out.level_hw).concat().iter().map(|a| a.bbox().clip(32, 32)).collect();
    let p = &b.proposals(&g, &out, 1, 32, 32)[0];
    assert!(!p.boxes.is_empty());
    for (bx, s) in p.boxes.iter().zip(&p.scores) {
        assert_eq!(*s, 0.5);
        let near = |a: &BBox| (a.x1 - bx.x1).abs().max((a.y1 - bx.y1).abs()).max((a.x2 - bx.x2).abs()).max((a.y2 - bx.y2).abs()) < 1e-9;
        assert!(anchors.iter().any(near), "{bx:?}");
    }
}

#[test]
fn zero_final_layers_give_neutral_outputs() {
    let mut store = ParamStore::<f64>::new();
    let b = branch(&mut store, 4, 6);
    for id in b.box_head.output_ids().into_iter().chain(b.mask_head.output_ids()) {
        let z = Tensor::zeros(store.value(id).shape());
        store.set(id, z).unwrap();
    }
    let mut g = Graph::new();
    let levels: Vec<Var> = [(8, 8), (4, 4)].iter().map(|&(h, w)| g.input(normal_tensor(&mut rng(7), &[1, 4, h, w], 1.0))).collect();
    let boxes = [(0, BBox::new(1.0, 1.0, 20.0, 14.0)), (0, BBox::new(3.0, 5.0, 9.0, 30.0)), (0, BBox::new(0.0, 0.0, 32.0, 32.0))];
    let (cls, reg) = b.box_forward(&mut g, &store, &levels, &boxes).unwrap();
    assert_eq!(g.value(cls).shape(), &[3, 1]);
    assert_eq!(g.value(reg).shape(), &[3, 4]);
    let p = g.sigmoid(cls);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    assert!(g.value(reg).data().iter().all(|&v| v == 0.0));
    let m = b.mask_forward(&mut g, &store, &levels, &boxes).unwrap();
    assert_eq!(g.value(m).shape(), &[3, 1, 8, 8]);
    let p = g.sigmoid(m);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn default_mask_head_is_28() {
    let mut store = ParamStore::<f32>::new();
    let h = MaskHead::new(&mut store, 8, 4, &mut rng(8));
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros(&[5, 8, 14, 14]));
    let y = h.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).shape(), &[5, 1, 28, 28]);
}

#[test]
fn head_gradients() {
    let mut store = ParamStore::<f64>::new();
    let b = branch(&mut store, 3, 9);
    let mut r = rng(10);
    randomize(&mut store, &mut r, 0.3);
    let levels = vec![normal_tensor(&mut r, &[1, 3, 8, 8], 1.0), normal_tensor(&mut r, &[1, 3, 4, 4], 1.0)];
    let boxes = [(0, BBox::new(1.3, 2.2, 20.6, 14.1)), (0, BBox::new(3.5, 5.1, 9.9, 29.7))];

    let ids = trainable(&store).into_iter().filter(|&i| store.name(i).starts_with("rpn.")).collect::<Vec<_>>();
    let rep = gradcheck::check(&mut store, &ids, &levels, FD_STEP, |g, st, v| {
        let o = b.rpn_forward(g, st, v)?;
        probe_all(g, &[o.objectness, o.deltas].concat())
    })
    .unwrap();
    assert!(rep.max_rel_error < FD_TOL, "rpn {} {:.3e}", rep.worst, rep.max_rel_error);

    let ids = trainable(&store).into_iter().filter(|&i| store.name(i).starts_with("box_head.")).collect::<Vec<_>>();
    let rep = gradcheck::check(&mut store, &ids, &levels, FD_STEP, |g, st, v| {
        let (c, d) = b.box_forward(g, st, v, &boxes)?;
        probe_all(g, &[c, d])
    })
    .unwrap();
    assert!(rep.max_rel_error < FD_TOL, "box {} {:.3e}", rep.worst, rep.max_rel_error);

    let ids = trainable(&store).into_iter().filter(|&i| store.name(i).starts_with("mask_head.")).collect::<Vec<_>>();
    let rep = gradcheck::check(&mut store, &ids, &levels, FD_STEP, |g, st, v| {
        let m = b.mask_forward(g, st, v, &boxes)?;
        probe(g, m)
    })
    .unwrap();
    assert!(rep.max_rel_error < FD_TOL, "mask {} {:.3e}", rep.worst, rep.max_rel_error);
}

#[test]
fn transposed_conv_gradients() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let inputs = [normal_tensor(&mut r, &[2, 3, 4, 4], 1.0), normal_tensor(&mut r, &[3, 5, 2, 2], 0.5), normal_tensor(&mut r, &[5], 0.5)];
    let rep = gradcheck::check(&mut store, &[], &inputs, FD_STEP, |g, _, v| {
        let y = g.conv_transpose_nonoverlap(v[0], v[1], v[2])?;
        probe(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_error < FD_TOL, "{:.3e}", rep.max_rel_error);
}

fn pool(feat: &Tensor<f64>, roi: RoiRef, out: usize, s: SamplingRatio) -> Tensor<f64> {
    let mut g = Graph::new();
    let f = g.input(feat.clone());
    let y = g.roi_align(&[f], &[roi], out, s).unwrap();
    g.value(y).clone()
}

#[test]
fn roi_align_of_constant_map() {
    let feat = Tensor::full(&[1, 2, 10, 10], 3.25);
    for s in [SamplingRatio::Fixed(2), SamplingRatio::Adaptive] {
        let p = pool(&feat, RoiRef { batch: 0, level: 0, x1: 1.3, y1: 0.7, x2: 8.2, y2: 6.9 }, 7, s);
        assert!(p.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }
}

#[test]
fn roi_align_on_grid_matches_direct_indexing() {
    let mut r = rng(12);
    for _ in 0..20 {
        let feat = normal_tensor(&mut r, &[1, 3, 16, 16], 1.0);
        let (x0, y0) = (r.random_range(0..9usize), r.random_range(0..9usize));
        let roi = RoiRef { batch: 0, level: 0, x1: x0 as f64, y1: y0 as f64, x2: (x0 + 7) as f64, y2: (y0 + 7) as f64 };
        let p = pool(&feat, roi, 7, SamplingRatio::Adaptive);
        for c in 0..3 {
            for by in 0..7 {
                for bx in 0..7 {
                    assert_eq!(p.get4(0, c, by, bx), feat.get4(0, c, y0 + by, x0 + bx));
                }
            }
        }
    }
}

#[test]
fn roi_align_two_sample_bins_are_block_means() {
    let mut r = rng(13);
    // Integer values keep the four-sample mean exact.
    let feat = Tensor::from_fn(&[1, 2, 16, 16], |_| r.random_range(-8..8) as f64);
    let roi = RoiRef { batch: 0, level: 0, x1: 1.0, y1: 2.0, x2: 15.0, y2: 16.0 };
    let p = pool(&feat, roi, 7, SamplingRatio::Fixed(2));
    for c in 0..2 {
        for by in 0..7 {
            for bx in 0..7 {
                let (y, x) = (2 + 2 * by, 1 + 2 * bx);
                let sum = feat.get4(0, c, y, x) + feat.get4(0, c, y, x + 1) + feat.get4(0, c, y + 1, x) + feat.get4(0, c, y + 1, x + 1);
                assert_eq!(p.get4(0, c, by, bx), sum / 4.0);
            }
        }
    }
}

#[test]
fn roi_align_gradients() {
    let mut r = rng(14);
    let mut store = ParamStore::<f64>::new();
    let rois = [
        RoiRef { batch: 0, level: 0, x1: 1.3, y1: 2.1, x2: 8.7, y2: 6.4 },
        RoiRef { batch: 0, level: 0, x1: 0.2, y1: 0.4, x2: 9.6, y2: 9.9 },
    ];
    for s in [SamplingRatio::Fixed(2), SamplingRatio::Adaptive] {
        let rep = gradcheck::check(&mut store, &[], &[normal_tensor(&mut r, &[1, 8, 10, 10], 1.0)], FD_STEP, |g, _, v| {
            let y = g.roi_align(v, &rois, 7, s)?;
            probe(g, y)
        })
        .unwrap();
        assert!(rep.max_rel_error < FD_TOL, "{s:?} {:.3e}", rep.max_rel_error);
    }
}

#[test]
fn degenerate_pipeline_does_not_crash() {
    let mut store = ParamStore::<f32>::new();
    let cfg = InstanceConfig { anchor_scales: vec![8.0, 16.0], fc_dim: 16, mask_convs: 1, ..InstanceConfig::default() };
    let b = InstanceBranch::new(&mut store, &cfg, 2, 4, &mut rng(15)).unwrap();
    store.zero_prefix("");
    let mut g = Graph::inference();
    let levels: Vec<Var> = [(8, 8), (4, 4)].iter().map(|&(h, w)| g.input(Tensor::zeros(&[2, 4, h, w]))).collect();
    let a = b.predict(&mut g, &store, &levels, 2, 32, 32).unwrap();
    let mut g2 = Graph::inference();
    let levels2: Vec<Var> = [(8, 8), (4, 4)].iter().map(|&(h, w)| g2.input(Tensor::zeros(&[2, 4, h, w]))).collect();
    let again = b.predict(&mut g2, &store, &levels2, 2, 32, 32).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.len(), 2);
    for set in &a {
        assert_eq!((set.width, set.height), (32, 32));
        assert!(set.instances.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..150.0f64, 1.0..150.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn encode_decode_round_trip(b in arb_box(), a in arb_box()) {
        for coder in [BoxCoder::default(), BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] }] {
            let d = coder.encode(&b, &a);
            prop_assume!((d[2] / coder.weights[2]).abs() < DELTA_CLAMP && (d[3] / coder.weights[3]).abs() < DELTA_CLAMP);
            let back = coder.decode(d, &a);
            prop_assert!((back.x1 - b.x1).abs() < 1e-4 && (back.y1 - b.y1).abs() < 1e-4);
            prop_assert!((back.x2 - b.x2).abs() < 1e-4 && (back.y2 - b.y2).abs() < 1e-4);
        }
    }

    #[test]
    fn nms_keeps_sorted_separated_subset(
        raw in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..40),
        t in 0.1..0.9f64,
    ) {
        let boxes: Vec<BBox> = raw.iter().map(|x| x.0).collect();
        let scores: Vec<f64> = raw.iter().map(|x| x.1).collect();
        let keep = nms(&boxes, &scores, t);
        let mut seen = std::collections::HashSet::new();
        for &k in &keep {
            prop_assert!(k < boxes.len() && seen.insert(k));
        }
        for w in keep.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(boxes[a].iou(&boxes[b]) < t);
            }
        }
    }
}
