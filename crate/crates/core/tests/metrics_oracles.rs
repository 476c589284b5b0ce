use ewod_core::metrics::{a_ose, average_precision, fogs, fss, gss, iou, u_recall, TaskEvalResult};
use ewod_core::protocol::DetectionRecord;
use ewod_core::rng::SeedStream;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn rec(image_id: u64, bbox: [f64; 4], class: u32, score: Option<f64>) -> DetectionRecord {
    DetectionRecord {
        image_id,
        domain: "d".into(),
        bbox,
        category_id: class,
        score,
    }
}

// Independent IoU via corner coordinates.
fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a[0], a[1], a[0] + a[2], a[1] + a[3]);
    let (bx1, by1, bx2, by2) = (b[0], b[1], b[0] + b[2], b[1] + b[3]);
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Quadratic reference: every prefix of the ranking is matched from scratch,
/// then the interpolated precision is integrated over distinct recall levels.
fn ap_oracle(preds: &[DetectionRecord], gts: &[DetectionRecord]) -> f64 {
    let mut order: Vec<&DetectionRecord> = preds.iter().collect();
    order.sort_by(|a, b| b.score.unwrap().partial_cmp(&a.score.unwrap()).unwrap());
    let n_gt = gts.len() as f64;
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for p in &order[..k] {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.image_id == p.image_id)
                .map(|(j, g)| (j, iou_corners(&p.bbox, &g.bbox)))
                .filter(|&(_, o)| o > 0.0)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((j, o)) = best {
                if o >= 0.5 && !used[j] {
                    used[j] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / n_gt, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut area = 0.0;
    let mut last = 0.0;
    for r in levels {
        let p = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        area += (r - last) * p;
        last = r;
    }
    100.0 * area
}

fn random_box(rng: &mut impl Rng) -> [f64; 4] {
    let x = rng.random_range(0.0..0.7);
    let y = rng.random_range(0.0..0.7);
    [x, y, rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)]
}

fn jitter(rng: &mut impl Rng, b: &[f64; 4], s: f64) -> [f64; 4] {
    [
        b[0] + rng.random_range(-s..s),
        b[1] + rng.random_range(-s..s),
        (b[2] * (1.0 + rng.random_range(-s..s))).max(0.01),
        (b[3] * (1.0 + rng.random_range(-s..s))).max(0.01),
    ]
}

#[test]
fn ap_matches_quadratic_oracle() {
    let mut rng = SeedStream::new(11).rng("ap");
    for case in 0..200 {
        let images = rng.random_range(1..5u64);
        let mut gts = Vec::new();
        for img in 0..images {
            for _ in 0..rng.random_range(1..5) {
                gts.push(rec(img, random_box(&mut rng), 1, None));
            }
        }
        let mut preds = Vec::new();
        for g in &gts {
            for _ in 0..rng.random_range(0..3) {
                preds.push(rec(g.image_id, jitter(&mut rng, &g.bbox, 0.08), 1, None));
            }
        }
        for _ in 0..rng.random_range(0..6) {
            preds.push(rec(rng.random_range(0..images), random_box(&mut rng), 1, None));
        }
        let mut scores: Vec<f64> = (0..preds.len()).map(|i| (i as f64 + rng.random_range(0.1..0.9)) / preds.len() as f64).collect();
        scores.shuffle(&mut rng);
        for (p, s) in preds.iter_mut().zip(scores) {
            p.score = Some(s);
        }
        // other-class records must not interfere
        preds.push(rec(0, gts[0].bbox, 2, Some(0.99)));
        let mut with_noise = gts.clone();
        with_noise.push(rec(0, random_box(&mut rng), 2, None));
        let got = average_precision(&preds, &with_noise, 1, 0.5).unwrap();
        let want = ap_oracle(&preds[..preds.len() - 1], &gts);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn ap_is_order_independent() {
    let mut rng = SeedStream::new(12).rng("order");
    let gts: Vec<_> = (0..6).map(|i| rec(i % 2, random_box(&mut rng), 3, None)).collect();
    let mut preds: Vec<_> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| rec(g.image_id, jitter(&mut rng, &g.bbox, 0.05), 3, Some(0.1 * i as f64)))
        .collect();
    let a = average_precision(&preds, &gts, 3, 0.5);
    preds.reverse();
    assert_eq!(a, average_precision(&preds, &gts, 3, 0.5));
}

#[test]
fn perfect_detections_score_full_ap_and_recall() {
    let mut rng = SeedStream::new(13).rng("perfect");
    let gts: Vec<_> = (0..10).map(|i| rec(i, random_box(&mut rng), 5, None)).collect();
    let preds: Vec<_> = gts.iter().map(|g| rec(g.image_id, g.bbox, 5, Some(0.9))).collect();
    assert_eq!(average_precision(&preds, &gts, 5, 0.5), Some(100.0));
    assert_eq!(u_recall(&preds, &gts, 5, 0.5), Some(100.0));
    assert_eq!(average_precision(&preds, &gts, 6, 0.5), None);
}

#[test]
fn duplicate_detections_are_false_positives() {
    let g = rec(0, [0.1, 0.1, 0.2, 0.2], 1, None);
    let preds = vec![rec(0, g.bbox, 1, Some(0.9)), rec(0, g.bbox, 1, Some(0.8))];
    assert_eq!(average_precision(&preds, std::slice::from_ref(&g), 1, 0.5), Some(100.0));
    let preds = vec![rec(0, g.bbox, 1, Some(0.8)), rec(0, [0.6, 0.6, 0.1, 0.1], 1, Some(0.9))];
    assert!((average_precision(&preds, &[g], 1, 0.5).unwrap() - 50.0).abs() < 1e-12);
}

#[test]
fn a_ose_counts_known_labels_on_unknown_objects() {
    let unk = 9;
    let gts = vec![rec(0, [0.1, 0.1, 0.2, 0.2], unk, None), rec(0, [0.6, 0.6, 0.2, 0.2], 1, None)];
    let preds = vec![
        rec(0, [0.1, 0.1, 0.2, 0.2], 1, Some(0.9)),
        rec(0, [0.1, 0.1, 0.2, 0.2], 2, Some(0.4)),
        rec(0, [0.1, 0.1, 0.2, 0.2], unk, Some(0.9)),
        rec(0, [0.6, 0.6, 0.2, 0.2], 2, Some(0.9)),
    ];
    assert_eq!(a_ose(&preds, &gts, unk, 0.5, 0.5), 1);
}

fn two(intro: f64, prev: f64, curr: f64) -> Vec<TaskEvalResult> {
    vec![
        TaskEvalResult::from_maps(1, None, Some(intro)),
        TaskEvalResult::from_maps(2, Some(prev), Some(curr)),
    ]
}

#[test]
fn headline_aggregates_recompute() {
    assert!((fss(&two(76.05, 73.15, 8.42)).unwrap().value - 96.19).abs() < 0.01);
    assert!((fss(&two(61.64, 39.98, 7.92)).unwrap().value - 64.86).abs() < 0.01);
    assert_eq!(gss(&two(76.05, 73.15, 8.42)).unwrap().value, 8.42);
    assert!((fogs(96.19, 78.62, 8.42) - 61.08).abs() < 0.01);
    assert!((fogs(64.86, 61.67, 7.92) - 44.82).abs() < 0.01);
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64),
                                    b in (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64)) {
        let a = [a.0, a.1, a.2, a.3];
        let b = [b.0, b.1, b.2, b.3];
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - iou(&b, &a)).abs() < 1e-15);
        prop_assert!((x - iou_corners(&a, &b)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64),
                                    dx in -0.5..0.5f64, dy in -0.5..0.5f64) {
        let a = [a.0, a.1, a.2, a.3];
        let b = [a[0] + 0.1, a[1] - 0.05, a[2] * 0.8, a[3] * 1.2];
        let shift = |r: [f64; 4]| [r[0] + dx, r[1] + dy, r[2], r[3]];
        prop_assert!((iou(&a, &b) - iou(&shift(a), &shift(b))).abs() < 1e-9);
    }

    #[test]
    fn fss_stays_in_range(intro in 0.1..100.0f64, prev in 0.0..100.0f64, curr in 0.0..100.0f64) {
        let s = fss(&two(intro, prev, curr)).unwrap().value;
        prop_assert!((0.0..=100.0).contains(&s));
    }
}
