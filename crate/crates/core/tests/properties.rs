use proptest::prelude::*;

use tubekit::anchors::{decode_regression, encode_regression, smooth_l1};
use tubekit::evaluation::{average_precision, tube_recall, Detection, GroundTruthBox};
use tubekit::geometry::{fit_linear_tube, iou, tube_overlap, BBox, Tube};
use tubekit::pooling::{toi_pool_forward, FeatureVolume, TemporalMode};
use tubekit::sampling::mine_hard_negatives;
use tubekit::suppression::{nms_boxes, nms_tubes, ScoredBox, ScoredTube};

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn tube(len: usize) -> impl Strategy<Value = Tube> {
    (bbox(), bbox()).prop_map(move |(s, e)| Tube::new(0, len, s, e).unwrap())
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let o = iou(&a, &b);
        prop_assert_eq!(o, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(o == 0.0, a.intersection_area(&b) == 0.0);
    }

    #[test]
    fn tube_overlap_symmetric(a in tube(6), b in tube(6)) {
        prop_assert_eq!(tube_overlap(&a, &b), tube_overlap(&b, &a));
        prop_assert_eq!(tube_overlap(&a, &a), 1.0);
    }

    #[test]
    fn interpolation_is_affine(t in tube(9)) {
        prop_assert_eq!(t.interpolate(0).unwrap(), *t.start());
        prop_assert_eq!(t.interpolate(8).unwrap(), *t.end());
        for k in 1..8 {
            let (a, b, c) = (t.interpolate(k - 1).unwrap(), t.interpolate(k).unwrap(), t.interpolate(k + 1).unwrap());
            for i in 0..4 {
                let second = a.coords()[i] - 2.0 * b.coords()[i] + c.coords()[i];
                prop_assert!(second.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_recovers_generating_tube(t in tube(12)) {
        let entries: Vec<_> = t.frames().collect();
        let fit = fit_linear_tube(&entries, t.chunk()).unwrap();
        for (a, b) in fit.tube.start().coords().iter().zip(t.start().coords()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in fit.tube.end().coords().iter().zip(t.end().coords()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn codec_round_trip(a in tube(5), t in tube(5)) {
        let back = decode_regression(&a, &encode_regression(&a, &t).unwrap()).unwrap();
        for (x, y) in back.start().coords().iter().chain(&back.end().coords()).zip(t.start().coords().iter().chain(&t.end().coords())) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn nms_output_invariants(
        boxes in prop::collection::vec((bbox(), 0.0..1.0f64), 0..12),
        thr in 0.0..1.0f64,
    ) {
        let items: Vec<ScoredBox> = boxes.iter().map(|&(b, s)| ScoredBox { bbox: b, frame: 0, score: s, class: None }).collect();
        let kept = nms_boxes(&items, thr).unwrap();
        for w in kept.windows(2) {
            prop_assert!(items[w[0]].score >= items[w[1]].score);
        }
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[n + 1..] {
                prop_assert!(iou(&items[i].bbox, &items[j].bbox) <= thr);
            }
        }
        for s in (0..items.len()).filter(|s| !kept.contains(s)) {
            prop_assert!(kept.iter().any(|&k| items[k].score >= items[s].score && iou(&items[k].bbox, &items[s].bbox) > thr));
        }
        prop_assert_eq!(nms_boxes(&items, 1.0).unwrap().len(), items.len());
    }

    #[test]
    fn toi_pooling_ignores_frame_order(seed in 0u64..1000, perm in Just([2usize, 0, 1])) {
        let data = ndarray::Array4::from_shape_fn((3, 2, 6, 6), |(t, c, y, x)| {
            ((seed as usize * 7919 + t * 131 + c * 17 + y * 5 + x * 3) % 97) as f64
        });
        let permuted = ndarray::Array4::from_shape_fn((3, 2, 6, 6), |(t, c, y, x)| data[[perm[t], c, y, x]]);
        let still = Tube::stationary(0, 3, BBox::new(1.0, 2.0, 9.0, 11.0).unwrap()).unwrap();
        for mode in [TemporalMode::Max, TemporalMode::Average] {
            let a = toi_pool_forward(FeatureVolume::new(data.clone(), 2.0).unwrap().view(), &still, 3, mode).unwrap();
            let b = toi_pool_forward(FeatureVolume::new(permuted.clone(), 2.0).unwrap().view(), &still, 3, mode).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pooling_is_monotone(bump in 0.0..5.0f64, at in (0usize..2, 0usize..2, 0usize..6, 0usize..6)) {
        let data = ndarray::Array4::from_shape_fn((2, 2, 6, 6), |(t, c, y, x)| ((t * 31 + c * 7 + y * 5 + x) % 11) as f64);
        let mut raised = data.clone();
        raised[[at.0, at.1, at.2, at.3]] += bump;
        let t = Tube::new(0, 2, BBox::new(0.0, 0.0, 7.0, 9.0).unwrap(), BBox::new(3.0, 2.0, 12.0, 12.0).unwrap()).unwrap();
        let a = toi_pool_forward(FeatureVolume::new(data, 2.0).unwrap().view(), &t, 2, TemporalMode::Max).unwrap();
        let b = toi_pool_forward(FeatureVolume::new(raised, 2.0).unwrap().view(), &t, 2, TemporalMode::Max).unwrap();
        prop_assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| y >= x));
    }

    #[test]
    fn ap_invariant_to_monotone_rescaling(
        dets in prop::collection::vec((0u32..3, bbox(), 0.01..1.0f64), 0..8),
        gts in prop::collection::vec((0u32..3, bbox()), 1..5),
    ) {
        let d: Vec<Detection> = dets.iter().map(|&(f, b, s)| Detection { video: "v".into(), frame: f, bbox: b, score: s, class: 0 }).collect();
        let g: Vec<GroundTruthBox> = gts.iter().map(|&(f, b)| GroundTruthBox { video: "v".into(), frame: f, bbox: b, class: 0 }).collect();
        let rescaled: Vec<Detection> = d.iter().map(|x| Detection { score: x.score.ln() * 3.0 + 1.0, ..x.clone() }).collect();
        let a = average_precision(&d, &g, 0.5);
        prop_assert_eq!(&a, &average_precision(&rescaled, &g, 0.5));
        let v = a[&0].unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn recall_monotone_in_proposals(props in prop::collection::vec(tube(4), 0..10), gts in prop::collection::vec(tube(4), 1..5)) {
        let mut last = 0.0;
        for k in 0..=props.len() {
            let r = tube_recall(&props[..k], &gts, 0.5).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn mined_negatives_are_clean(props in prop::collection::vec((tube(3), 0.0..1.0f64), 0..15), gts in prop::collection::vec(tube(3), 0..3), k in 0usize..8) {
        let scored: Vec<ScoredTube> = props.iter().map(|&(t, s)| ScoredTube { tube: t, score: s, class: None }).collect();
        let hard = mine_hard_negatives(&scored, &gts, k);
        prop_assert!(hard.len() <= k);
        for w in hard.windows(2) {
            prop_assert!(scored[w[0]].score >= scored[w[1]].score);
        }
        for &h in &hard {
            prop_assert!(gts.iter().all(|g| tube_overlap(&scored[h].tube, g) == 0.0));
        }
    }

    #[test]
    fn tube_nms_keeps_top(items in prop::collection::vec((tube(3), 0.0..1.0f64), 1..10), thr in 0.0..1.0f64) {
        let scored: Vec<ScoredTube> = items.iter().map(|&(t, s)| ScoredTube { tube: t, score: s, class: None }).collect();
        let kept = nms_tubes(&scored, thr).unwrap();
        let best = scored.iter().map(|s| s.score).fold(f64::MIN, f64::max);
        prop_assert_eq!(scored[kept[0]].score, best);
    }
}

#[test]
fn smooth_l1_joins_smoothly_at_one() {
    for x in [1.0f64, -1.0] {
        let h = 1e-12;
        let left = smooth_l1(x - x.signum() * h);
        let right = smooth_l1(x + x.signum() * h);
        assert!((left - right).abs() < 1e-9);
        let eps = 1e-7;
        let slope_in = (smooth_l1(x) - smooth_l1(x - x.signum() * eps)) / eps;
        let slope_out = (smooth_l1(x + x.signum() * eps) - smooth_l1(x)) / eps;
        assert!((slope_in - slope_out).abs() < 1e-6);
    }
}

/// Greedy NMS is not monotone in its threshold: a box that survives at the
/// higher threshold can suppress two boxes that survived at the lower one.
#[test]
fn greedy_nms_kept_count_not_monotone() {
    let raw = [
        ((0, 10, 4, 16), 0.766),
        ((14, 1, 22, 11), 0.703),
        ((19, 2, 22, 13), 0.579),
        ((13, 12, 20, 22), 0.679),
        ((13, 16, 18, 25), 0.771),
        ((10, 1, 22, 6), 0.512),
        ((18, 0, 20, 11), 0.713),
        ((18, 20, 25, 29), 0.659),
    ];
    let items: Vec<ScoredBox> = raw
        .iter()
        .map(|&((x1, y1, x2, y2), s)| ScoredBox {
            bbox: BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap(),
            frame: 0,
            score: s,
            class: None,
        })
        .collect();
    assert_eq!(nms_boxes(&items, 0.2).unwrap(), vec![4, 0, 6, 7, 2, 5]);
    assert_eq!(nms_boxes(&items, 0.3).unwrap(), vec![4, 0, 6, 1, 7]);
}
