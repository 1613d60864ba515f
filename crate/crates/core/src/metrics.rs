//! Detection-quality metrics: greedy score-ordered matching, all-points
//! interpolated average precision, mAP at one or averaged over ten IoU
//! thresholds, a micro-averaged F1 sweep, and the evaluation report that
//! bundles them with cost numbers.

use serde::{Deserialize, Serialize};

use crate::model::{iou_xyxy, Detection, GtBox};

/// Detections and ground truth for one image.
#[derive(Debug, Clone, Default)]
pub struct EvalSample {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// The ten IoU thresholds behind the 50–95 averaged metric.
pub fn iou_thresholds() -> [f64; 10] {
    let mut t = [0.0; 10];
    for (i, v) in t.iter_mut().enumerate() {
        *v = 0.5 + 0.05 * i as f64;
    }
    t
}

/// Everything the evaluation pipeline reports. Cost fields (`params`,
/// `flops`, `inference_ms`) are filled by the profiler; metric fields by
/// [`evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at IoU 0.5 per class; `None` for classes with no ground truth
    /// (excluded from the mean).
    pub per_class_ap50: Vec<Option<f64>>,
    pub map50: f64,
    pub map50_95: f64,
    /// Micro-averaged F1 at the best confidence cut, IoU 0.5.
    pub f1: f64,
    /// Raw (recall, precision) points per class at IoU 0.5.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
    pub params: u64,
    pub flops: u64,
    pub inference_ms: f64,
}

impl EvalReport {
    /// Key-value text form, one `key=value` per line; PR curves elided.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (c, ap) in self.per_class_ap50.iter().enumerate() {
            match ap {
                Some(v) => s.push_str(&format!("ap50_class_{c}={v:.6}\n")),
                None => s.push_str(&format!("ap50_class_{c}=n/a\n")),
            }
        }
        s.push_str(&format!("map50={:.6}\n", self.map50));
        s.push_str(&format!("map50_95={:.6}\n", self.map50_95));
        s.push_str(&format!("f1={:.6}\n", self.f1));
        s.push_str(&format!("params={}\n", self.params));
        s.push_str(&format!("flops={}\n", self.flops));
        s.push_str(&format!("inference_ms={:.3}\n", self.inference_ms));
        s
    }
}

/// Greedy matching for one class: detections in descending score order each
/// claim the highest-IoU unmatched ground-truth box of their image at or
/// above the threshold. Returns (score, was-matched) pairs in that order and
/// the class's ground-truth count.
fn class_matches(
    samples: &[EvalSample],
    class: usize,
    iou_thresh: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (img, s) in samples.iter().enumerate() {
        for (d, det) in s.dets.iter().enumerate() {
            if det.class == class {
                order.push((det.score, img, d));
            }
        }
    }
    // stable sort: equal scores keep (image, detection) order
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut gt_taken: Vec<Vec<bool>> =
        samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let gt_count = samples
        .iter()
        .flat_map(|s| &s.gts)
        .filter(|g| g.class == class)
        .count();

    let mut out = Vec::with_capacity(order.len());
    for (score, img, d) in order {
        let det = &samples[img].dets[d];
        let dbox = [det.x1, det.y1, det.x2, det.y2];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in samples[img].gts.iter().enumerate() {
            if gt.class != class || gt_taken[img][g] {
                continue;
            }
            let iou = iou_xyxy(dbox, [gt.x1, gt.y1, gt.x2, gt.y2]);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[img][g] = true;
            out.push((score, true));
        } else {
            out.push((score, false));
        }
    }
    (out, gt_count)
}

/// Area under the all-points interpolated precision-recall staircase from
/// score-ordered match flags.
fn ap_from_matches(matches: &[(f64, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(matches.len());
    let mut rec = Vec::with_capacity(matches.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in matches.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / gt_count as f64);
    }
    // precision envelope: best achievable at any recall ≥ r
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..rec.len() {
        if rec[i] > prev_r {
            ap += (rec[i] - prev_r) * prec[i];
            prev_r = rec[i];
        }
    }
    ap
}

/// AP for one class at one IoU threshold. `None` when the class has no
/// ground truth anywhere — such classes stay out of the mean.
pub fn average_precision(
    samples: &[EvalSample],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let (matches, gt_count) = class_matches(samples, class, iou_thresh);
    if gt_count == 0 {
        return None;
    }
    Some(ap_from_matches(&matches, gt_count))
}

/// Raw (recall, precision) points for one class at one IoU threshold.
pub fn pr_points(samples: &[EvalSample], class: usize, iou_thresh: f64) -> Vec<(f64, f64)> {
    let (matches, gt_count) = class_matches(samples, class, iou_thresh);
    if gt_count == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(matches.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in matches.iter().enumerate() {
        tp += hit as usize;
        out.push((tp as f64 / gt_count as f64, tp as f64 / (k + 1) as f64));
    }
    out
}

/// Mean AP over the classes that have ground truth; 0 when none do.
pub fn mean_ap(samples: &[EvalSample], num_classes: usize, iou_thresh: f64) -> f64 {
    let aps: Vec<f64> = (0..num_classes)
        .filter_map(|c| average_precision(samples, c, iou_thresh))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Harmonic mean of precision and recall; zero when both vanish.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Best micro-averaged F1 over all confidence cuts at one IoU threshold:
/// every class's matches merge into one score-ordered list, and each prefix
/// is a candidate operating point.
pub fn best_f1(samples: &[EvalSample], num_classes: usize, iou_thresh: f64) -> f64 {
    let mut merged: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0usize;
    for c in 0..num_classes {
        let (m, g) = class_matches(samples, c, iou_thresh);
        merged.extend(m);
        total_gt += g;
    }
    if total_gt == 0 || merged.is_empty() {
        return 0.0;
    }
    merged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 0.0f64;
    let mut tp = 0usize;
    for (k, &(_, hit)) in merged.iter().enumerate() {
        tp += hit as usize;
        let p = tp as f64 / (k + 1) as f64;
        let r = tp as f64 / total_gt as f64;
        best = best.max(f1_score(p, r));
    }
    best
}

/// Full metric sweep: per-class AP and PR curves at 0.5, mAP at 0.5 and
/// averaged over the ten thresholds, best micro-F1. Cost fields are zeroed
/// for the caller to fill.
pub fn evaluate(samples: &[EvalSample], num_classes: usize) -> EvalReport {
    let per_class_ap50: Vec<Option<f64>> =
        (0..num_classes).map(|c| average_precision(samples, c, 0.5)).collect();
    let map50 = mean_ap(samples, num_classes, 0.5);
    let map50_95 = iou_thresholds()
        .iter()
        .map(|&t| mean_ap(samples, num_classes, t))
        .sum::<f64>()
        / 10.0;
    EvalReport {
        per_class_ap50,
        map50,
        map50_95,
        f1: best_f1(samples, num_classes, 0.5),
        pr_curves: (0..num_classes).map(|c| pr_points(samples, c, 0.5)).collect(),
        params: 0,
        flops: 0,
        inference_ms: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn det(class: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection { class, score, x1: b[0], y1: b[1], x2: b[2], y2: b[3] }
    }

    fn gt(class: usize, b: [f64; 4]) -> GtBox {
        GtBox { class, x1: b[0], y1: b[1], x2: b[2], y2: b[3] }
    }

    #[test]
    fn overlap_hand_values() {
        let b = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou_xyxy(b, b), 1.0);
        assert_eq!(iou_xyxy(b, [5.0, 5.0, 7.0, 7.0]), 0.0);
        assert_relative_eq!(iou_xyxy(b, [1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_and_empty_cases() {
        let b = [0.0, 0.0, 4.0, 4.0];
        let perfect = vec![EvalSample { dets: vec![det(0, 0.9, b)], gts: vec![gt(0, b)] }];
        assert_eq!(average_precision(&perfect, 0, 0.5), Some(1.0));

        let no_dets = vec![EvalSample { dets: vec![], gts: vec![gt(0, b)] }];
        assert_eq!(average_precision(&no_dets, 0, 0.5), Some(0.0));

        let nothing = vec![EvalSample::default()];
        assert_eq!(average_precision(&nothing, 0, 0.5), None);
        assert_eq!(mean_ap(&nothing, 3, 0.5), 0.0);
    }

    #[test]
    fn classes_without_ground_truth_stay_out_of_the_mean() {
        let b = [0.0, 0.0, 4.0, 4.0];
        let samples = vec![EvalSample {
            // class 1 has a detection but no ground truth anywhere
            dets: vec![det(0, 0.9, b), det(1, 0.8, b)],
            gts: vec![gt(0, b)],
        }];
        let report = evaluate(&samples, 2);
        assert_eq!(report.per_class_ap50, vec![Some(1.0), None]);
        assert_eq!(report.map50, 1.0);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let b = [0.0, 0.0, 4.0, 4.0];
        let samples = vec![EvalSample {
            dets: vec![det(0, 0.9, b), det(0, 0.8, b)],
            gts: vec![gt(0, b)],
        }];
        // second detection has no unmatched GT left: precision staircase is
        // (1/1, 1/2) at recall 1 throughout → AP stays 1
        assert_eq!(average_precision(&samples, 0, 0.5), Some(1.0));
        // reversed scores: the duplicate outranks the hit → AP = 0.5
        let flipped = vec![EvalSample {
            dets: vec![
                det(0, 0.9, [0.0, 0.0, 1.9, 4.0]), // IoU 0.475, below thresh
                det(0, 0.8, b),
            ],
            gts: vec![gt(0, b)],
        }];
        assert_eq!(average_precision(&flipped, 0, 0.5), Some(0.5));
    }

    #[test]
    fn f1_hand_values() {
        assert_relative_eq!(f1_score(0.65, 0.65), 0.65, epsilon = 1e-12);
        assert_eq!(f1_score(1.0, 0.0), 0.0);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn micro_f1_sweeps_every_prefix() {
        let b = [0.0, 0.0, 4.0, 4.0];
        let far = [10.0, 10.0, 14.0, 14.0];
        // 3 GT; detections: hit, miss, hit — prefixes give F1
        // 2·(1·1/3)/(1+1/3)=0.5, then (1/2, 1/3)→0.4, then (2/3, 2/3)→2/3
        let samples = vec![EvalSample {
            dets: vec![
                det(0, 0.9, b),
                det(0, 0.8, [20.0, 20.0, 24.0, 24.0]),
                det(0, 0.7, far),
            ],
            gts: vec![gt(0, b), gt(0, far), gt(0, [30.0, 0.0, 34.0, 4.0])],
        }];
        assert_relative_eq!(best_f1(&samples, 1, 0.5), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn saturated_detector_scores_one_across_thresholds() {
        let mut samples = Vec::new();
        for i in 0..4 {
            let b = [i as f64 * 10.0, 0.0, i as f64 * 10.0 + 6.0, 6.0];
            samples.push(EvalSample {
                dets: vec![det(i % 2, 1.0, b)],
                gts: vec![gt(i % 2, b)],
            });
        }
        let report = evaluate(&samples, 2);
        assert_eq!(report.map50, 1.0);
        assert_eq!(report.map50_95, 1.0);
        assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn averaged_map_never_exceeds_single_threshold_map() {
        let samples = random_instances(60, 0xBEEF);
        for s in samples {
            let r = evaluate(&s, 3);
            assert!(
                r.map50_95 <= r.map50 + 1e-12,
                "mAP50-95 {} > mAP50 {}",
                r.map50_95,
                r.map50
            );
        }
    }

    #[test]
    fn ap_ignores_order_preserving_score_changes() {
        for samples in random_instances(40, 0xF00D) {
            let base = average_precision(&samples, 0, 0.5);
            let squashed: Vec<EvalSample> = samples
                .iter()
                .map(|s| EvalSample {
                    dets: s
                        .dets
                        .iter()
                        .map(|d| Detection { score: 0.1 + 0.5 * d.score.tanh(), ..d.clone() })
                        .collect(),
                    gts: s.gts.clone(),
                })
                .collect();
            assert_eq!(base, average_precision(&squashed, 0, 0.5));
        }
    }

    #[test]
    fn worst_fp_never_helps_best_tp_never_hurts() {
        for mut samples in random_instances(40, 0xCAFE) {
            let base = average_precision(&samples, 0, 0.5).unwrap_or(0.0);
            // lowest-score far-away false positive
            samples[0]
                .dets
                .push(det(0, 1e-6, [900.0, 900.0, 905.0, 905.0]));
            let with_fp = average_precision(&samples, 0, 0.5).unwrap_or(0.0);
            assert!(with_fp <= base + 1e-12);
            samples[0].dets.pop();

            // highest-score perfect match on a fresh GT
            let fresh = [500.0, 500.0, 520.0, 520.0];
            samples[0].gts.push(gt(0, fresh));
            let before = average_precision(&samples, 0, 0.5).unwrap_or(0.0);
            samples[0].dets.push(det(0, 2.0, fresh));
            let with_tp = average_precision(&samples, 0, 0.5).unwrap_or(0.0);
            assert!(with_tp >= before - 1e-12);
        }
    }

    /// Independent AP implementation: exhaustive matching scan plus direct
    /// max-probing staircase integration, O(n²) everywhere.
    fn ap_brute(samples: &[EvalSample], class: usize, thresh: f64) -> Option<f64> {
        let mut gt_total = 0;
        for s in samples {
            gt_total += s.gts.iter().filter(|g| g.class == class).count();
        }
        if gt_total == 0 {
            return None;
        }
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            for (d, dd) in s.dets.iter().enumerate() {
                if dd.class == class {
                    all.push((dd.score, i, d));
                }
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<usize>> = samples.iter().map(|_| Vec::new()).collect();
        let mut flags = Vec::new();
        for &(_, i, d) in &all {
            let dd = &samples[i].dets[d];
            let mut pick = None;
            let mut pick_iou = 0.0;
            for (g, gg) in samples[i].gts.iter().enumerate() {
                if gg.class != class || used[i].contains(&g) {
                    continue;
                }
                let iou = iou_xyxy(
                    [dd.x1, dd.y1, dd.x2, dd.y2],
                    [gg.x1, gg.y1, gg.x2, gg.y2],
                );
                if iou >= thresh && iou > pick_iou {
                    pick = Some(g);
                    pick_iou = iou;
                }
            }
            match pick {
                Some(g) => {
                    used[i].push(g);
                    flags.push(true);
                }
                None => flags.push(false),
            }
        }
        // staircase: for each distinct recall level, probe every point
        let mut prec = Vec::new();
        let mut rec = Vec::new();
        let mut tp = 0;
        for (k, &f) in flags.iter().enumerate() {
            tp += f as usize;
            prec.push(tp as f64 / (k + 1) as f64);
            rec.push(tp as f64 / gt_total as f64);
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..rec.len() {
            if rec[k] > prev {
                let mut best = 0.0f64;
                for j in 0..rec.len() {
                    if rec[j] >= rec[k] {
                        best = best.max(prec[j]);
                    }
                }
                ap += (rec[k] - prev) * best;
                prev = rec[k];
            }
        }
        Some(ap)
    }

    fn random_instances(count: usize, seed: u64) -> Vec<Vec<EvalSample>> {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut out = Vec::new();
        for _ in 0..count {
            let imgs = 1 + (next() * 5.0) as usize;
            let mut inst = Vec::new();
            for _ in 0..imgs {
                let mut s = EvalSample::default();
                for _ in 0..(next() * 6.0) as usize {
                    let (x, y) = (next() * 80.0, next() * 80.0);
                    s.gts.push(gt(
                        (next() * 3.0) as usize,
                        [x, y, x + 4.0 + next() * 20.0, y + 4.0 + next() * 20.0],
                    ));
                }
                for _ in 0..(next() * 6.0) as usize {
                    let (x, y) = (next() * 80.0, next() * 80.0);
                    s.dets.push(det(
                        (next() * 3.0) as usize,
                        next(),
                        [x, y, x + 4.0 + next() * 20.0, y + 4.0 + next() * 20.0],
                    ));
                }
                // half the detections shadow a GT box to produce matches
                let n_g = s.gts.len();
                for g in 0..n_g {
                    if next() < 0.5 {
                        let gg = &s.gts[g];
                        let jitter = next() * 3.0;
                        s.dets.push(det(
                            gg.class,
                            next(),
                            [gg.x1 + jitter, gg.y1, gg.x2 + jitter, gg.y2],
                        ));
                    }
                }
                inst.push(s);
            }
            out.push(inst);
        }
        out
    }

    #[test]
    fn ap_matches_brute_force_on_two_hundred_instances() {
        for (i, samples) in random_instances(200, 0x5EED).iter().enumerate() {
            for class in 0..3 {
                let fast = average_precision(samples, class, 0.5);
                let brute = ap_brute(samples, class, 0.5);
                match (fast, brute) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() < 1e-9, "instance {i} class {class}: {a} vs {b}")
                    }
                    other => panic!("instance {i} class {class}: disagree on presence {other:?}"),
                }
            }
        }
    }
}
