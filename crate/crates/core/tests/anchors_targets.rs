mod common;

use common::{assign_ref, bce, random_box, sigmoid};
use pdse::anchors::{
    assign_targets, decode_box, encode_box, focal_loss, generate_anchors, smooth_l1_loss, AnchorLabel, AnchorSpec,
    MatchThresholds,
};
use pdse::geometry::{iou, BBox};
use pdse::tensor::gradcheck::finite_diff_check;
use pdse::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn anchor_totals_match_grid_sums() {
    let spec = AnchorSpec::default();
    for (h, w) in [(128, 128), (256, 256), (256, 384), (512, 128)] {
        let set = generate_anchors(&spec, h, w).unwrap();
        let want: usize = (3..=7).map(|l| (h >> l) * (w >> l) * 9).sum();
        assert_eq!(set.total(), want);
        assert_eq!(set.all().len(), want);
        for l in &set.levels {
            for (j, b) in l.boxes.iter().enumerate() {
                let cell = j / l.per_cell;
                let (cx, cy) = b.center();
                let s = l.stride as f64;
                assert!((cx - s * ((cell % l.width) as f64 + 0.5)).abs() < 1e-9);
                assert!((cy - s * ((cell / l.width) as f64 + 0.5)).abs() < 1e-9);
            }
        }
    }
    assert!(generate_anchors(&spec, 200, 256).is_err());
}

#[test]
fn iou_spot_values() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert!((iou(&a, &BBox::new(5.0, 5.0, 15.0, 15.0)) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&BBox::new(0.0, 0.0, 4.0, 4.0), &BBox::new(10.0, 10.0, 12.0, 12.0)), 0.0);
    assert_eq!(iou(&BBox::new(1.0, 1.0, 1.0, 5.0), &a), 0.0);
}

#[test]
fn assignment_edge_cases_and_oracle() {
    let th = MatchThresholds::default();
    let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 40.0, 40.0)];
    let r = assign_targets(&anchors, &[(anchors[1], 4)], th).unwrap();
    assert_eq!(r.labels[1], AnchorLabel::Positive { class: 4, gt: 0 });
    assert_eq!(r.targets[1], [0.0; 4]);
    let r = assign_targets(&anchors, &[], th).unwrap();
    assert_eq!(r.num_positive(), 0);
    assert_eq!(r.num_ignored(), 0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let anchors: Vec<BBox> = (0..200).map(|_| random_box(&mut rng, 128.0, 4.0, 48.0)).collect();
        let gts: Vec<(BBox, u8)> = (0..5)
            .map(|_| (random_box(&mut rng, 128.0, 4.0, 48.0), rng.random_range(1..=9)))
            .collect();
        let r = assign_targets(&anchors, &gts, th).unwrap();
        assert_eq!(r.labels, assign_ref(&anchors, &gts, th));
        // A box with any overlapping anchor above threshold keeps at least one.
        for (j, (g, _)) in gts.iter().enumerate() {
            if anchors.iter().any(|a| iou(a, g) >= th.positive) {
                assert!(r.labels.iter().any(|l| matches!(l, AnchorLabel::Positive { gt, .. } if *gt == j)));
            }
        }
    }
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_box(&mut rng, 256.0, 8.0, 128.0);
        let b = random_box(&mut rng, 256.0, 2.0, 128.0);
        let d = encode_box(&a, &b).unwrap();
        let back = decode_box(&a, &d, None).unwrap();
        for (u, v) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            worst = worst.max((u - v).abs());
        }
    }
    assert!(worst < 1e-5, "{worst}");
    let a = BBox::new(3.0, 4.0, 19.0, 36.0);
    assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
    assert_eq!(decode_box(&a, &[0.0; 4], None).unwrap(), a);
    let big = decode_box(&a, &[0.0, 0.0, 50.0, 50.0], None).unwrap();
    assert!((big.width() / a.width() - 1000.0 / 16.0).abs() < 1e-9);
    let clipped = decode_box(&a, &[0.0, 0.0, 3.0, 3.0], Some((32.0, 32.0))).unwrap();
    assert!(clipped.x1 >= 0.0 && clipped.x2 <= 32.0 && clipped.y2 <= 32.0);
    assert!(encode_box(&BBox::new(1.0, 1.0, 1.0, 4.0), &a).is_err());
}

fn focal_ref(logits: &[f64], labels: &[AnchorLabel], k: usize, alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut pos = 0;
    for (i, l) in labels.iter().enumerate() {
        let class = match l {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Background => 0,
            AnchorLabel::Positive { class, .. } => {
                pos += 1;
                *class as usize
            }
        };
        for j in 0..k {
            let p = sigmoid(logits[i * k + j]);
            let (pt, at) = if class == j + 1 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            total += -at * (1.0 - pt).powf(gamma) * pt.ln();
        }
    }
    total / pos.max(1) as f64
}

fn random_labels(rng: &mut ChaCha8Rng, a: usize, k: usize) -> Vec<AnchorLabel> {
    (0..a)
        .map(|_| match rng.random_range(0..4) {
            0 => AnchorLabel::Ignore,
            1 => AnchorLabel::Positive {
                class: rng.random_range(1..=k) as u8,
                gt: 0,
            },
            _ => AnchorLabel::Background,
        })
        .collect()
}

#[test]
fn focal_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let (a, k) = (rng.random_range(1..40), rng.random_range(1..10));
        let labels = random_labels(&mut rng, a, k);
        let logits: Vec<f64> = (0..a * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = focal_loss(&logits, &labels, k, 0.25, 2.0).unwrap();
        let want = focal_ref(&logits, &labels, k, 0.25, 2.0);
        assert!((got.value - want).abs() <= 1e-9 * want.max(1.0), "{} vs {want}", got.value);
    }
    let all_ignored = focal_loss(&[0.3, -0.2], &[AnchorLabel::Ignore], 2, 0.25, 2.0).unwrap();
    assert!(all_ignored.all_ignored && all_ignored.value == 0.0);
    assert!(focal_loss(&[0.0; 3], &[AnchorLabel::Background], 2, 0.25, 2.0).is_err());
}

#[test]
fn smooth_l1_values_and_gradient() {
    let beta = 1.0 / 9.0;
    assert_eq!(smooth_l1_loss(&[[1.0, 2.0, 3.0, 4.0]], &[[1.0, 2.0, 3.0, 4.0]], beta).unwrap(), 0.0);
    assert_eq!(smooth_l1_loss(&[], &[], beta).unwrap(), 0.0);
    let at = smooth_l1_loss(&[[beta, 0.0, 0.0, 0.0]], &[[0.0; 4]], beta).unwrap() * 4.0;
    assert!((at - 0.5 * beta).abs() < 1e-15);
    let below = smooth_l1_loss(&[[beta - 1e-9, 0.0, 0.0, 0.0]], &[[0.0; 4]], beta).unwrap() * 4.0;
    let above = smooth_l1_loss(&[[beta + 1e-9, 0.0, 0.0, 0.0]], &[[0.0; 4]], beta).unwrap() * 4.0;
    assert!((below - at).abs() < 1e-8 && (above - at).abs() < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 50 {
        let d = Tensor::from_fn(&[8], |_| rng.random_range(-1.0..1.0));
        if d.data().iter().any(|v: &f64| (v.abs() - beta).abs() < 1e-4) {
            continue;
        }
        let target = Tensor::zeros(&[8]);
        let mask = Tensor::full(&[8], 1.0);
        let rep = finite_diff_check(|g, x| g.smooth_l1(x, &target, &mask, beta, 2.0), &d, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        done += 1;
    }
}

#[test]
fn balanced_zero_gamma_focal_is_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (a, k) = (rng.random_range(1..20), rng.random_range(1..6));
        let labels = random_labels(&mut rng, a, k);
        let logits: Vec<f64> = (0..a * k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let fl = 2.0 * focal_loss(&logits, &labels, k, 0.5, 0.0).unwrap().value;
        let mut total = 0.0;
        let mut pos = 0;
        for (i, l) in labels.iter().enumerate() {
            let c = match l {
                AnchorLabel::Ignore => continue,
                AnchorLabel::Background => 0,
                AnchorLabel::Positive { class, .. } => {
                    pos += 1;
                    *class as usize
                }
            };
            for j in 0..k {
                total += bce(logits[i * k + j], (c == j + 1) as u8 as f64);
            }
        }
        let want = total / pos.max(1) as f64;
        assert!((fl - want).abs() <= 1e-9 * want.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn focusing_down_weights_easy_examples(x in 0.001f64..15.0, alpha in 0.05f64..0.95, positive in any::<bool>()) {
        // p_t > 0.5 for a positive with x > 0 or a negative with x < 0.
        let (logit, label) = if positive {
            (x, AnchorLabel::Positive { class: 1, gt: 0 })
        } else {
            (-x, AnchorLabel::Background)
        };
        let g2 = focal_loss(&[logit], &[label], 1, alpha, 2.0).unwrap().value;
        let g0 = focal_loss(&[logit], &[label], 1, alpha, 0.0).unwrap().value;
        prop_assert!(g2 < g0);
    }

    #[test]
    fn raising_positive_threshold_never_adds_positives(seed in any::<u64>(), lo in 0.3f64..0.7, step in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<BBox> = (0..60).map(|_| random_box(&mut rng, 64.0, 4.0, 32.0)).collect();
        let gts: Vec<(BBox, u8)> = (0..3).map(|_| (random_box(&mut rng, 64.0, 4.0, 32.0), 1)).collect();
        let count = |p: f64| assign_targets(&anchors, &gts, MatchThresholds { positive: p, negative: 0.3 }).unwrap().num_positive();
        prop_assert!(count(lo + step) <= count(lo));
    }

    #[test]
    fn encode_decode_is_bijective(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_box(&mut rng, 512.0, 4.0, 256.0);
        let b = random_box(&mut rng, 512.0, 1.0, 256.0);
        let back = decode_box(&a, &encode_box(&a, &b).unwrap(), None).unwrap();
        prop_assert!((back.x1 - b.x1).abs() < 1e-5 && (back.y1 - b.y1).abs() < 1e-5);
        prop_assert!((back.x2 - b.x2).abs() < 1e-5 && (back.y2 - b.y2).abs() < 1e-5);
    }

    #[test]
    fn duplicated_background_keeps_normalization(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, k) = (rng.random_range(2..20), 3);
        let labels = random_labels(&mut rng, a, k);
        let logits: Vec<f64> = (0..a * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive { .. })).count().max(1) as f64;
        let mut labels2 = labels.clone();
        let mut logits2 = logits.clone();
        let mut bg_sum = 0.0;
        for (i, l) in labels.iter().enumerate() {
            if *l == AnchorLabel::Background {
                labels2.push(*l);
                logits2.extend_from_slice(&logits[i * k..(i + 1) * k]);
                bg_sum += focal_ref(&logits[i * k..(i + 1) * k], &[*l], k, 0.25, 2.0);
            }
        }
        let before = focal_loss(&logits, &labels, k, 0.25, 2.0).unwrap().value;
        let after = focal_loss(&logits2, &labels2, k, 0.25, 2.0).unwrap().value;
        prop_assert!((after - (before + bg_sum / pos)).abs() < 1e-9);
    }
}
