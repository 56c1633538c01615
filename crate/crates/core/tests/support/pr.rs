//! Brute-force AP: precision and recall are recomputed from scratch at every
//! score cut, then interpolated at 101 recall points.

use hgfsod::eval::average_precision;
use hgfsod::{iou, BBox, ClassId, Detection, GroundTruth};

/// True-positive count among the `k` best detections, matched greedily in
/// score order (ties by list order) to the best unused ground truth.
fn true_positives(
    order: &[usize],
    dets: &[Detection],
    gts: &[GroundTruth],
    k: usize,
    thr: f64,
) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for &d in &order[..k] {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class != dets[d].class {
                continue;
            }
            let v = iou(&dets[d].bbox, &g.bbox);
            if v >= best_iou && best.map_or(true, |b| v > iou(&dets[d].bbox, &gts[b].bbox)) {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// AP of one class (every detection and ground truth must share it).
pub fn class_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let curve: Vec<(f64, f64)> = (1..=dets.len())
        .map(|k| {
            let tp = true_positives(&order, dets, gts, k, thr) as f64;
            (tp / gts.len() as f64, tp / k as f64)
        })
        .collect();
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

fn square(x: f64, y: f64) -> BBox {
    BBox::new(x, y, 10.0, 10.0).unwrap()
}

/// Compares `average_precision` with [`class_ap`] on every list of up to
/// `max_dets` detections, in every order, drawn from a box palette times
/// `scores`, against every non-empty subset of three ground-truth boxes,
/// at IoU 0.5 and 0.75. The palette holds an exact copy of GT0, a close and
/// a loose copy (the loose one also overlaps GT1), a shifted GT2 and pure
/// background. Returns the number of comparisons.
pub fn exhaustive_sweep(scores: &[f64], max_dets: usize) -> Result<usize, String> {
    let class = ClassId::novel(0);
    let gt_boxes = [square(0.0, 0.0), square(5.0, 0.0), square(40.0, 40.0)];
    let palette = [
        square(0.0, 0.0),
        square(1.0, 0.0),
        square(3.0, 0.0),
        square(42.0, 40.0),
        square(100.0, 100.0),
    ];
    let choices: Vec<(BBox, f64)> = palette
        .iter()
        .flat_map(|b| scores.iter().map(move |s| (*b, *s)))
        .collect();
    let mut checked = 0;
    for n in 0..=max_dets {
        for code in 0..choices.len().pow(n as u32) {
            let mut rest = code;
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let (bbox, score) = choices[rest % choices.len()];
                    rest /= choices.len();
                    Detection { class, bbox, score }
                })
                .collect();
            for mask in 1..8u32 {
                let gts: Vec<GroundTruth> = (0..3)
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| GroundTruth {
                        class,
                        bbox: gt_boxes[k],
                    })
                    .collect();
                for thr in [0.5, 0.75] {
                    let got = average_precision(&dets, &gts, thr);
                    let want = class_ap(&dets, &gts, thr);
                    if (got - want).abs() > 1e-12 {
                        return Err(format!("{dets:?} vs {gts:?} at {thr}: {got} != {want}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

/// The three worked examples: a perfect detection, no detections, and a
/// false positive ranked above the only hit.
pub fn hand_cases() -> Result<(), String> {
    let c = ClassId::novel(1);
    let gt = [GroundTruth {
        class: c,
        bbox: square(0.0, 0.0),
    }];
    let perfect = [Detection {
        class: c,
        bbox: square(0.0, 0.0),
        score: 1.0,
    }];
    let two = [
        Detection {
            class: c,
            bbox: square(0.0, 0.0),
            score: 0.9,
        },
        Detection {
            class: c,
            bbox: square(60.0, 60.0),
            score: 0.95,
        },
    ];
    // PR points (0, 0) then (1, 1/2); the envelope is 1/2 at every recall level.
    let cases = [
        ("perfect", average_precision(&perfect, &gt, 0.5), 1.0),
        ("empty", average_precision(&[], &gt, 0.5), 0.0),
        ("fp first", average_precision(&two, &gt, 0.5), 0.5),
    ];
    for (name, got, want) in cases {
        if got != want {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok(())
}
