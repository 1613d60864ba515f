//! Randomized invariants: shape algebra, suppression guarantees, split
//! bookkeeping, loss symmetries, and ranking-metric invariances, each
//! checked over hundreds of generated cases.

use proptest::prelude::*;

use oxidet::attention::eca_kernel_size;
use oxidet::data::{letterbox, split, Image};
use oxidet::loss::ciou_xyxy;
use oxidet::metrics::{average_precision, EvalSample};
use oxidet::model::{iou_xyxy, nms, Detection, GtBox};
use oxidet::tensor::Tensor;

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn arb_detection() -> impl Strategy<Value = Detection> {
    (arb_box(), 0..3usize, 0.0..1.0f64).prop_map(|(b, class, score)| Detection {
        class,
        score,
        x1: b[0],
        y1: b[1],
        x2: b[2],
        y2: b[3],
    })
}

fn arb_samples() -> impl Strategy<Value = Vec<EvalSample>> {
    proptest::collection::vec(
        (
            proptest::collection::vec(arb_detection(), 0..6),
            proptest::collection::vec((arb_box(), 0..3usize), 0..5),
        ),
        1..4,
    )
    .prop_map(|images| {
        images
            .into_iter()
            .map(|(dets, gt)| EvalSample {
                dets,
                gts: gt
                    .into_iter()
                    .map(|(b, class)| GtBox { class, x1: b[0], y1: b[1], x2: b[2], y2: b[3] })
                    .collect(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn conv_output_shape_matches_the_closed_form(
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 1usize..10,
        w in 1usize..10,
        k in 1usize..5,
        s in 1usize..3,
        p in 0usize..3,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let x = Tensor::<f64>::zeros(&[n, cin, h, w]);
        let wt = Tensor::<f64>::zeros(&[cout, cin, k, k]);
        let y = x.conv2d(&wt, None, s, (p, p), 1).unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        prop_assert_eq!(y.shape(), &[n, cout, oh, ow]);
    }

    #[test]
    fn nms_survivors_stay_below_the_overlap_threshold(
        dets in proptest::collection::vec(arb_detection(), 0..24),
        thresh in 0.1..0.9f64,
    ) {
        let kept = nms(dets, thresh, 300);
        for (i, a) in kept.iter().enumerate() {
            for b in kept.iter().skip(i + 1) {
                if a.class == b.class {
                    let iou = iou_xyxy([a.x1, a.y1, a.x2, a.y2], [b.x1, b.y1, b.x2, b.y2]);
                    prop_assert!(iou < thresh, "kept boxes overlap at {iou} >= {thresh}");
                }
            }
        }
        // scores must come out sorted, best first
        for pair in kept.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn split_partitions_the_file_list_exactly(
        n in 1usize..200,
        seed in 0u64..1000,
    ) {
        let files: Vec<String> = (0..n).map(|i| format!("f{i:03}")).collect();
        let m = split(&files, seed).unwrap();
        prop_assert_eq!(m.train.len(), ((n as f64) * 0.7).round() as usize);
        prop_assert_eq!(
            m.val.len(),
            (((n as f64) * 0.2).round() as usize).min(n - m.train.len())
        );
        prop_assert_eq!(m.train.len() + m.val.len() + m.test.len(), n);
        let mut all: Vec<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
        all.sort();
        let mut expect: Vec<&String> = files.iter().collect();
        expect.sort();
        prop_assert_eq!(all, expect);
    }

    #[test]
    fn ciou_is_symmetric_nonnegative_and_zero_on_identity(
        a in arb_box(),
        b in arb_box(),
    ) {
        let ab = ciou_xyxy(a, b).unwrap();
        let ba = ciou_xyxy(b, a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12, "asymmetric: {ab} vs {ba}");
        prop_assert!(ab >= 0.0);
        prop_assert!(ciou_xyxy(a, a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn average_precision_ignores_monotone_score_rescaling(
        samples in arb_samples(),
        class in 0..3usize,
    ) {
        let mapped: Vec<EvalSample> = samples
            .iter()
            .map(|s| EvalSample {
                dets: s
                    .dets
                    .iter()
                    .map(|d| Detection { score: 0.05 + 0.9 / (1.0 + (-d.score).exp()), ..*d })
                    .collect(),
                gts: s.gts.clone(),
            })
            .collect();
        let before = average_precision(&samples, class, 0.5);
        let after = average_precision(&mapped, class, 0.5);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn letterboxing_round_trips_boxes_inside_the_image(
        w in 8usize..200,
        h in 8usize..200,
        frac in (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64),
    ) {
        let img = Image::filled(w, h, [0, 0, 0]);
        let (_, lb) = letterbox(&img, 64);
        let (fx, fy, fw, fh) = frac;
        let b = [
            fx * w as f64,
            fy * h as f64,
            (fx + fw).min(1.0) * w as f64,
            (fy + fh).min(1.0) * h as f64,
        ];
        let round = lb.unapply(lb.apply(b));
        for i in 0..4 {
            prop_assert!((round[i] - b[i]).abs() < 1e-9, "side {i}: {} vs {}", round[i], b[i]);
        }
    }

    #[test]
    fn eca_kernels_are_odd_and_grow_with_width(c in 1usize..2048) {
        let k = eca_kernel_size(c, 2.0, 1.0).unwrap();
        prop_assert!(k % 2 == 1);
        prop_assert!(k >= 1);
        let k2 = eca_kernel_size(c * 2, 2.0, 1.0).unwrap();
        prop_assert!(k2 >= k, "kernel shrank from {k} to {k2} when channels doubled");
    }
}
