mod common;

use common::*;
use light_core::autograd::{Graph, Var};
use light_core::losses::*;
use light_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn bce_ref(x: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn sl1_ref(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        0.5 * e * e / beta
    } else {
        e.abs() - 0.5 * beta
    }
}

fn height_at(err: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::full(&[1, 1, 4, 4], 0.3 + err));
    let l = height_loss(&mut g, p, &Tensor::full(&[1, 1, 4, 4], 0.3), HEIGHT_BETA, None).unwrap();
    g.value(l).data()[0]
}

#[test]
fn smooth_l1_reference_values() {
    for (e, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
        assert!((height_at(e) - want).abs() < 1e-6, "error {e}");
    }
}

#[test]
fn zero_logits_cost_ln2() {
    let mut r = rng(1);
    let t = Tensor::from_fn(&[3, 1, 28, 28], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[3, 1, 28, 28]));
    let l = mask_loss(&mut g, Some(x), &t).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn saturated_predictions_cost_nothing() {
    let t = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t.map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
    let l = mask_loss(&mut g, Some(x), &t).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    let ones = Tensor::full(&[6], 1.0);
    let tgt = Tensor::from_vec(&[6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let logits = g.leaf(tgt.map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
    let bt = Tensor::from_vec(&[6], vec![0.1, -0.2, 0.3, 0.0, 0.5, 1.0]).unwrap();
    let boxes = g.leaf(bt.clone());
    let det = detection_loss(
        &mut g,
        &DetectionInputs {
            rpn_objectness: vec![Term { pred: logits, target: &tgt, mask: &ones }],
            rpn_boxes: vec![Term { pred: boxes, target: &bt, mask: &ones }],
            rpn_sampled: 6,
            roi_class: None,
            roi_boxes: None,
            roi_sampled: 0,
        },
    )
    .unwrap();
    assert!(g.value(det.total).data()[0] < 1e-6);
}

/// Random masked batches against per-element loops.
#[test]
fn detection_and_mask_loss_match_loops() {
    let mut r = rng(2);
    for _ in 0..10 {
        let n = 24;
        let logits = normal_tensor(&mut r, &[n], 2.0);
        let labels = Tensor::from_fn(&[n], |_| r.random_bool(0.3) as u8 as f64);
        let sampled = Tensor::from_fn(&[n], |_| r.random_bool(0.7) as u8 as f64);
        let pos = labels.zip_map(&sampled, |a, b| a * b);
        let pos4 = Tensor::from_fn(&[n, 4], |i| pos.data()[i / 4]);
        let deltas = normal_tensor(&mut r, &[n, 4], 0.5);
        let tdeltas = normal_tensor(&mut r, &[n, 4], 0.5);
        let count = sampled.data().iter().filter(|&&v| v > 0.0).count();

        let mut g = Graph::<f64>::new();
        let (lv, dv) = (g.leaf(logits.clone()), g.leaf(deltas.clone()));
        let det = detection_loss(
            &mut g,
            &DetectionInputs {
                rpn_objectness: vec![Term { pred: lv, target: &labels, mask: &sampled }],
                rpn_boxes: vec![Term { pred: dv, target: &tdeltas, mask: &pos4 }],
                rpn_sampled: count,
                roi_class: Some(Term { pred: lv, target: &labels, mask: &sampled }),
                roi_boxes: Some(Term { pred: dv, target: &tdeltas, mask: &pos4 }),
                roi_sampled: count,
            },
        )
        .unwrap();

        let (mut cls, mut rpn_box, mut roi_box) = (0.0, 0.0, 0.0);
        for i in 0..n {
            if sampled.data()[i] > 0.0 {
                cls += bce_ref(logits.data()[i], labels.data()[i]);
            }
            if pos.data()[i] > 0.0 {
                for k in 0..4 {
                    let e = deltas.data()[4 * i + k] - tdeltas.data()[4 * i + k];
                    rpn_box += sl1_ref(e, RPN_BOX_BETA);
                    roi_box += sl1_ref(e, ROI_BOX_BETA);
                }
            }
        }
        let c = count.max(1) as f64;
        let want = 2.0 * cls / c + rpn_box / c + roi_box / c;
        assert!((g.value(det.total).data()[0] - want).abs() < 1e-6);

        let ml = normal_tensor(&mut r, &[2, 1, 6, 6], 3.0);
        let mt = Tensor::from_fn(&[2, 1, 6, 6], |_| r.random_bool(0.5) as u8 as f64);
        let mv = g.leaf(ml.clone());
        let l = mask_loss(&mut g, Some(mv), &mt).unwrap();
        let want: f64 = ml.data().iter().zip(mt.data()).map(|(&x, &t)| bce_ref(x, t)).sum::<f64>() / 72.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-6);
    }
}

#[test]
fn no_mask_rois_cost_zero() {
    let mut g = Graph::<f64>::new();
    let l = mask_loss(&mut g, None, &Tensor::zeros(&[0])).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn building_only_height_mask() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::from_vec(&[1, 1, 1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap());
    let t = Tensor::from_vec(&[1, 1, 1, 4], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let m = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let l = height_loss(&mut g, p, &t, 1.0, Some(&m)).unwrap();
    assert!((g.value(l).data()[0] - 0.125).abs() < 1e-12);
}

#[test]
fn all_zero_parts_total_zero() {
    let mut g = Graph::<f64>::new();
    let z: Vec<Var> = (0..3).map(|_| g.leaf(Tensor::scalar(0.0))).collect();
    let (t, r) = total_loss(&mut g, Some(z[0]), Some(z[1]), Some(z[2]), &LossWeights::default(), 0).unwrap();
    assert_eq!(r.total, 0.0);
    assert_eq!(g.value(t).data()[0], 0.0);
}

fn total(parts: [f64; 3], w: LossWeights) -> (f64, f64) {
    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = parts.iter().map(|&p| g.leaf(Tensor::scalar(p))).collect();
    let (t, r) = total_loss(&mut g, Some(v[0]), Some(v[1]), Some(v[2]), &w, 0).unwrap();
    (g.value(t).data()[0], r.total)
}

#[test]
fn doubling_height_weight_doubles_its_share() {
    let parts = [0.7, 0.4, 0.9];
    let base = LossWeights { det: 1.0, mask: 1.0, height: 1.0 };
    let (a, _) = total(parts, base);
    let (b, _) = total(parts, LossWeights { height: 2.0, ..base });
    assert!((b - a - parts[2]).abs() < 1e-12);
}

proptest! {
    #[test]
    fn total_is_linear_in_each_weight(
        parts in prop::array::uniform3(0.0..10.0f64),
        w in prop::array::uniform3(0.0..5.0f64),
        k in 0usize..3,
        s in 0.0..4.0f64,
    ) {
        let lw = |w: [f64; 3]| LossWeights { det: w[0], mask: w[1], height: w[2] };
        let (a, ra) = total(parts, lw(w));
        let mut w2 = w;
        w2[k] += s;
        let (b, rb) = total(parts, lw(w2));
        prop_assert!((b - a - s * parts[k]).abs() < 1e-6);
        prop_assert!((rb - ra - s * parts[k]).abs() < 1e-6);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn height_loss_is_smooth_at_beta(sign in prop::bool::ANY) {
        let sg = if sign { 1.0 } else { -1.0 };
        let (lo, hi) = (sg * (HEIGHT_BETA - 1e-6), sg * (HEIGHT_BETA + 1e-6));
        prop_assert!((height_at(lo) - height_at(hi)).abs() < 1e-5);
        let slope = |e: f64| {
            let mut g = Graph::<f64>::new();
            let p = g.leaf(Tensor::scalar(e));
            let l = height_loss(&mut g, p, &Tensor::scalar(0.0), HEIGHT_BETA, None).unwrap();
            g.backward(l).of(p).unwrap().data()[0]
        };
        prop_assert!((slope(lo) - slope(hi)).abs() < 1e-5);
    }

    #[test]
    fn losses_are_nonnegative(x in prop::collection::vec(-30.0..30.0f64, 1..20), t in 0.0..1.0f64) {
        let n = x.len();
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::from_vec(&[n], x).unwrap());
        let tgt = Tensor::full(&[n], t.round());
        let ones = Tensor::full(&[n], 1.0);
        let b = bce_loss(&mut g, &[Term { pred: v, target: &tgt, mask: &ones }], n).unwrap();
        let s = smooth_l1_loss(&mut g, &[Term { pred: v, target: &tgt, mask: &ones }], 1.0, n).unwrap();
        prop_assert!(g.value(b).data()[0] >= 0.0 && g.value(s).data()[0] >= 0.0);
    }
}
