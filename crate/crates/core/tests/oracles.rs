//! Library results against independent reference computations.

use advart::detector::{extract_attack_scores, nms, Detection};
use advart::eval::{average_precision, iou, Scored};
use advart::imaging::ssim;
use advart::optimize::AdamState;
use advart::patchops::BoundingBox;
use advart::tensorgrad::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/reference.rs"]
mod reference;

use reference::{ap_cases, brute_force_ap, bx, corner_iou, ADAM_GRADS, ADAM_LR, ADAM_START};

// ---- average precision ------------------------------------------------------

#[test]
fn average_precision_matches_brute_force_enumeration() {
    for (name, truths, cands) in ap_cases() {
        let lib = average_precision(&truths, &cands, 0.5).unwrap().ap;
        let oracle = brute_force_ap(&truths, &cands);
        assert!((lib - oracle).abs() <= 1e-12, "{name}: library {lib} vs enumeration {oracle}");
    }
}

#[test]
fn five_detection_case_has_the_hand_value() {
    // Ranks: TP, FP, TP, FP (duplicate of t1), TP. Interpolated precision is
    // 1 up to recall 1/3, 2/3 up to recall 2/3 and 3/5 up to recall 1.
    let (_, truths, cands) = &ap_cases()[1];
    let ap = average_precision(truths, cands, 0.5).unwrap().ap;
    assert!((ap - 100.0 * (1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0) + (1.0 / 3.0) * 0.6)).abs() < 1e-12, "{ap}");
}

proptest! {
    #[test]
    fn ap_ignores_monotone_rescoring(scores in proptest::collection::vec(0.01f64..1.0, 6), k in 0.1f64..5.0) {
        let t = [bx(0.2, 0.3, 0.2, 0.3), bx(0.7, 0.6, 0.2, 0.3)];
        let cands = [t[0], t[1], bx(0.5, 0.5, 0.1, 0.1), bx(0.21, 0.3, 0.2, 0.3), t[1], bx(0.9, 0.1, 0.1, 0.1)];
        let truths = vec![vec![t[0], t[1]]];
        let a: Vec<Scored> = vec![cands.iter().zip(&scores).map(|(b, s)| (*b, *s)).collect()];
        let b: Vec<Scored> = vec![cands.iter().zip(&scores).map(|(b, s)| (*b, (k * s).exp())).collect()];
        let x = average_precision(&truths, &a, 0.5).unwrap();
        let y = average_precision(&truths, &b, 0.5).unwrap();
        prop_assert_eq!(x.ap, y.ap);
        prop_assert!(x.points.windows(2).all(|w| w[0].recall <= w[1].recall));
        prop_assert!((0.0..=100.0).contains(&x.ap));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5),
                                     b in (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5)) {
        let (p, q) = (bx(a.0, a.1, a.2, a.3), bx(b.0, b.1, b.2, b.3));
        let v = iou(&p, &q);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&q, &p));
        prop_assert!((v - corner_iou(&p, &q)).abs() < 1e-12);
    }
}

// ---- SSIM -------------------------------------------------------------------

/// Frozen from scikit-image; see `reference::ssim_cases`.
#[test]
fn ssim_matches_reference_values() {
    for (name, a, b, expected) in reference::ssim_cases() {
        let v = ssim(&a, &b).unwrap();
        assert!((v - expected).abs() < 1e-6, "{name}: {v} vs {expected}");
    }
}

#[test]
fn adam_matches_hand_executed_recurrence() {
    let mut params = ADAM_START.to_vec();
    let mut st = AdamState::new(2, ADAM_LR);
    for g in &ADAM_GRADS {
        st.update(&mut params, g).unwrap();
    }
    let expected = reference::adam_by_hand();
    for i in 0..2 {
        assert!((params[i] - expected[i]).abs() < 1e-12, "{} vs {}", params[i], expected[i]);
    }
    assert_eq!(st.step, 3);
}

// ---- NMS and attack scores --------------------------------------------------

fn det(cx: f64, cy: f64, w: f64, h: f64, class: usize, score: f64) -> Detection {
    let mut class_probs = vec![0.0; 2];
    class_probs[class] = 1.0;
    Detection {
        bbox: BoundingBox::new(cx, cy, w, h, class),
        objectness: score,
        class_probs,
    }
}

/// The kept set is the unique subset in which a box survives exactly when
/// no kept, higher-scoring box of its class overlaps it beyond the threshold.
fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let higher = |j: usize, i: usize| dets[j].score() > dets[i].score() || (dets[j].score() == dets[i].score() && j < i);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                j != i && kept(j) && higher(j, i) && dets[j].bbox.class_id == dets[i].bbox.class_id && corner_iou(&dets[j].bbox, &dets[i].bbox) > thr
            });
            kept(i) != blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "the fixed point is unique");
    (0..n).filter(|i| found[0] & (1 << i) != 0).collect()
}

#[test]
fn nms_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let n = rng.gen_range(1..=9);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                det(
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0..2),
                    rng.gen_range(0.05..1.0),
                )
            })
            .collect();
        let expected: Vec<Detection> = {
            let mut idx = brute_force_nms(&dets, 0.45);
            idx.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));
            idx.into_iter().map(|i| dets[i].clone()).collect()
        };
        assert_eq!(nms(dets, 0.45), expected);
    }
}

#[test]
fn attack_scores_match_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, grid, classes) = (3, 4, 3);
    let per = 5 + classes;
    let raw = Tensor::from_fn([n, grid, grid, per], |_| rng.gen_range(-4.0..4.0));
    for target in 0..classes {
        let mut g = Graph::new();
        let r = g.constant(raw.clone());
        let s = extract_attack_scores(&mut g, r, target).unwrap();
        for img in 0..n {
            let mut best = f64::NEG_INFINITY;
            for cell in 0..grid * grid {
                let o = (img * grid * grid + cell) * per;
                let v = &raw.data()[o..o + per];
                let obj = 1.0 / (1.0 + (-v[4]).exp());
                let z: f64 = v[5..].iter().map(|l| l.exp()).sum();
                best = best.max(obj * v[5 + target].exp() / z);
            }
            assert!((g.value(s).data()[img] - best).abs() < 1e-12);
        }
    }
}
