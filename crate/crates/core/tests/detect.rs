use pageforge_core::detect::*;
use pageforge_core::gradcheck::grad_check;
use pageforge_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

/// IoU by counting unit pixels on the integer grid.
fn pixel_iou(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let inside = |r: (i64, i64, i64, i64), x: i64, y: i64| {
        x >= r.0 && x < r.0 + r.2 && y >= r.1 && y < r.1 + r.3
    };
    for y in -1..60 {
        for x in -1..60 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

fn corner_box(r: (i64, i64, i64, i64)) -> BBox {
    BBox::from_xywh_corner(r.0 as f64, r.1 as f64, r.2 as f64, r.3 as f64)
}

#[test]
fn iou_agrees_with_pixel_count() {
    assert!(
        (iou(&corner_box((0, 0, 10, 10)), &corner_box((5, 0, 10, 10))) - 1.0 / 3.0).abs() < 1e-12
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let mut r = || {
            (
                rng.random_range(0..30),
                rng.random_range(0..30),
                rng.random_range(1..25),
                rng.random_range(1..25),
            )
        };
        let (a, b) = (r(), r());
        let v = iou(&corner_box(a), &corner_box(b));
        assert!((v - pixel_iou(a, b)).abs() < 1e-6);
        assert_eq!(v, iou(&corner_box(b), &corner_box(a)));
    }
}

#[test]
fn corner_conversion_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let b = BBox::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(0.5..40.0),
            rng.random_range(0.5..40.0),
        );
        let (x0, y0, x1, y1) = b.corners();
        let r = BBox::from_corners(x0, y0, x1, y1);
        for (u, v) in r.to_array().iter().zip(b.to_array()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn encode_decode_round_trip(
        x in -100.0f64..400.0, y in -100.0f64..400.0, w in 4.0f64..300.0, h in 4.0f64..300.0,
        ax in 0.0f64..300.0, ay in 0.0f64..300.0, aw in 16.0f64..200.0, ah in 16.0f64..200.0,
    ) {
        let gt = BBox::new(x, y, w, h);
        let anchor = BBox::new(ax, ay, aw, ah);
        let back = decode(&encode(&gt, &anchor).unwrap(), &anchor);
        for (u, v) in back.to_array().iter().zip(gt.to_array()) {
            prop_assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn decode_encode_round_trip(
        dx in -2.0f64..2.0, dy in -2.0f64..2.0, dw in -DELTA_CLAMP..DELTA_CLAMP, dh in -DELTA_CLAMP..DELTA_CLAMP,
        aw in 16.0f64..200.0, ah in 16.0f64..200.0,
    ) {
        let anchor = BBox::new(50.0, 60.0, aw, ah);
        let d = BoxDelta { dx, dy, dw, dh };
        let back = encode(&decode(&d, &anchor), &anchor).unwrap();
        for (u, v) in back.to_array().iter().zip(d.to_array()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn anchors_cover_every_pixel() {
    let set = AnchorSet::for_image(256, 320, &STRIDES, 32.0).unwrap();
    assert_eq!(set.per_location, 9);
    let expected: usize = STRIDES
        .iter()
        .map(|s| 256usize.div_ceil(*s) * 320usize.div_ceil(*s) * 9)
        .sum();
    assert_eq!(set.len(), expected);
    let p3: Vec<_> = set
        .anchors
        .iter()
        .filter(|a| a.level == 0)
        .map(|a| a.bbox.corners())
        .collect();
    for y in 0..256 {
        for x in 0..320 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            assert!(
                p3.iter()
                    .any(|c| px >= c.0 && px <= c.2 && py >= c.1 && py <= c.3),
                "pixel {x},{y}"
            );
        }
    }
    let a = &set.anchors[3];
    assert_eq!((a.bbox.w, a.bbox.h), (32.0, 32.0));
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                rng.random_range(20.0..230.0),
                rng.random_range(20.0..230.0),
                rng.random_range(10.0..120.0),
                rng.random_range(8.0..60.0),
            )
        })
        .collect()
}

/// Per-anchor rule applied literally, anchor by anchor.
fn brute_force_labels(set: &AnchorSet, gts: &[BBox], classes: &[usize]) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = set
        .anchors
        .iter()
        .map(|a| {
            let mut best = (0.0, None);
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(&a.bbox, g);
                if v > best.0 {
                    best = (v, Some(gi));
                }
            }
            match best {
                (v, Some(gi)) if v >= 0.5 => AnchorLabel::Positive {
                    gt: gi,
                    class: classes[gi],
                },
                (v, _) if v < 0.4 => AnchorLabel::Negative,
                _ => AnchorLabel::Ignore,
            }
        })
        .collect();
    for (gi, g) in gts.iter().enumerate() {
        let has = labels
            .iter()
            .any(|l| matches!(l, AnchorLabel::Positive { gt, .. } if *gt == gi));
        if has {
            continue;
        }
        let mut best = (0.0, None);
        for (ai, a) in set.anchors.iter().enumerate() {
            let v = iou(&a.bbox, g);
            if v > best.0 {
                best = (v, Some(ai));
            }
        }
        if let (_, Some(ai)) = best {
            labels[ai] = AnchorLabel::Positive {
                gt: gi,
                class: classes[gi],
            };
        }
    }
    labels
}

#[test]
fn assignment_matches_brute_force() {
    let set = AnchorSet::for_image(256, 256, &STRIDES, 32.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [0, 1, 3, 6] {
        let gts = random_scene(&mut rng, n);
        let classes: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let t = assign_targets(&set, &gts, &classes, AssignConfig::default()).unwrap();
        assert_eq!(t.labels, brute_force_labels(&set, &gts, &classes));
        assert!(t.positives.len() >= n.min(1));
        if n == 0 {
            assert!(t.labels.iter().all(|l| *l == AnchorLabel::Negative));
        }
    }
}

#[test]
fn assignment_examples() {
    let set = AnchorSet::for_image(256, 256, &STRIDES, 32.0).unwrap();
    let anchor = set.anchors[9 * 40 + 4].bbox;
    let t = assign_targets(&set, &[anchor], &[0], AssignConfig::default()).unwrap();
    assert_eq!(
        t.labels[9 * 40 + 4],
        AnchorLabel::Positive { gt: 0, class: 0 }
    );
    let (_, d) = t.positives.iter().find(|(a, _)| *a == 9 * 40 + 4).unwrap();
    assert!(d.to_array().iter().all(|v| v.abs() < 1e-12));
    // every anchor overlapping a tiny box at IoU ~ 0.3 or less is negative, except the forced one
    let tiny = BBox::new(100.0, 100.0, 10.0, 10.0);
    let t = assign_targets(&set, &[tiny], &[0], AssignConfig::default()).unwrap();
    assert_eq!(t.num_positive(), 1);
    assert_eq!(t.num_ignored(), 0);
}

#[test]
fn shifting_gt_by_one_stride_shifts_positives() {
    let set = AnchorSet::for_image(256, 256, &STRIDES, 32.0).unwrap();
    let gt = BBox::new(100.0, 124.0, 40.0, 30.0);
    let shifted = BBox::new(108.0, 124.0, 40.0, 30.0);
    let a = assign_targets(&set, &[gt], &[0], AssignConfig::default()).unwrap();
    let b = assign_targets(&set, &[shifted], &[0], AssignConfig::default()).unwrap();
    let pa: Vec<usize> = a.positives.iter().map(|p| p.0).collect();
    let pb: Vec<usize> = b.positives.iter().map(|p| p.0).collect();
    assert!(!pa.is_empty() && pa.iter().all(|&i| i < set.level_len(0)));
    assert_eq!(pa.iter().map(|i| i + 9).collect::<Vec<_>>(), pb);
}

fn det(x: f64, y: f64, w: f64, h: f64, score: f64, anchor: usize) -> Detection {
    Detection {
        bbox: BBox::new(x, y, w, h),
        score,
        class: 0,
        level: 0,
        anchor,
    }
}

/// O(n^2) reference: walk in rank order, a box survives iff no earlier survivor overlaps it.
fn nms_reference(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].anchor.cmp(&dets[b].anchor))
    });
    let mut alive = vec![true; dets.len()];
    for i in 0..order.len() {
        if !alive[order[i]] {
            continue;
        }
        for j in i + 1..order.len() {
            if iou(&dets[order[i]].bbox, &dets[order[j]].bbox) > t {
                alive[order[j]] = false;
            }
        }
    }
    order
        .into_iter()
        .filter(|&i| alive[i])
        .map(|i| dets[i].clone())
        .collect()
}

#[test]
fn nms_examples() {
    let a = det(10.0, 10.0, 10.0, 10.0, 0.9, 0);
    assert_eq!(nms(std::slice::from_ref(&a), 0.2), vec![a.clone()]);
    let b = det(10.0, 10.0, 10.0, 10.0, 0.8, 1);
    assert_eq!(nms(&[b.clone(), a.clone()], 0.2), vec![a.clone()]);
    let c = det(10.0, 10.0, 10.0, 10.0, 0.9, 5);
    assert_eq!(nms(&[c, a.clone()], 0.2), vec![a]);
}

#[test]
fn nms_matches_reference_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let dets: Vec<Detection> = (0..50)
            .map(|i| {
                let s = (rng.random_range(0..20) as f64) / 20.0;
                det(
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(5.0..60.0),
                    rng.random_range(5.0..60.0),
                    s,
                    i,
                )
            })
            .collect();
        let kept = nms(&dets, 0.2);
        assert_eq!(kept, nms_reference(&dets, 0.2));
        assert_eq!(nms(&kept, 0.2), kept);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.2);
            }
        }
    }
}

fn targets(labels: Vec<AnchorLabel>) -> ClassTargets {
    let positives = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, AnchorLabel::Positive { .. }))
        .map(|(i, _)| (i, BoxDelta::default()))
        .collect();
    ClassTargets { labels, positives }
}

#[test]
fn cls_loss_examples() {
    let pos = targets(vec![AnchorLabel::Positive { gt: 0, class: 0 }]);
    assert!(cls_loss(&[1.0], 1, &pos).unwrap() < 1e-6);
    assert!((cls_loss(&[0.5], 1, &pos).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let ign = targets(vec![AnchorLabel::Ignore, AnchorLabel::Negative]);
    assert_eq!(
        cls_loss(&[0.9, 0.0], 1, &ign).unwrap(),
        cls_loss(&[0.1, 0.0], 1, &ign).unwrap()
    );
}

/// Eq. 1 summed by hand: each anchor's terms over its normaliser.
fn hand_cls_loss(p: &[f64], k: usize, labels: &[AnchorLabel]) -> f64 {
    let npos = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
        .count()
        .max(1) as f64;
    let nni = labels
        .iter()
        .filter(|l| **l != AnchorLabel::Ignore)
        .count()
        .max(1) as f64;
    let mut total = 0.0;
    for (a, l) in labels.iter().enumerate() {
        for c in 0..k {
            let pc = p[a * k + c].clamp(1e-7, 1.0 - 1e-7);
            match l {
                AnchorLabel::Ignore => {}
                AnchorLabel::Negative => total += -(1.0 - pc).ln() / nni,
                AnchorLabel::Positive { class, .. } => {
                    total += if *class == c {
                        -pc.ln()
                    } else {
                        -(1.0 - pc).ln()
                    } / npos;
                }
            }
        }
    }
    total
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<AnchorLabel> {
    (0..n)
        .map(|i| match rng.random_range(0..4) {
            0 => AnchorLabel::Positive {
                gt: i,
                class: rng.random_range(0..k),
            },
            1 => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        })
        .collect()
}

#[test]
fn cls_loss_matches_hand_sum_and_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (n, k) = (rng.random_range(1..12), rng.random_range(1..4));
        let labels = random_labels(&mut rng, n, k);
        let z: Vec<f64> = (0..n * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = targets(labels.clone());
        let v = cls_loss(&p, k, &t).unwrap();
        assert!(v >= 0.0);
        assert!((v - hand_cls_loss(&p, k, &labels)).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let zv = g.constant(Tensor::new([n, k], z).unwrap());
        let l = cls_loss_node(&mut g, zv, &t, 0.0).unwrap();
        assert!((g.value(l).item() - v).abs() < 1e-12);
    }
    let t = targets(vec![AnchorLabel::Negative]);
    assert!(cls_loss(&[2.0], 1, &t).unwrap() > 10.0);
}

#[test]
fn reg_loss_examples() {
    assert_eq!(
        reg_loss(&[[0.1, 0.2, 0.3, 0.4]], &[[0.1, 0.2, 0.3, 0.4]]),
        0.0
    );
    assert_eq!(reg_loss(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]]), 0.25);
    assert_eq!(reg_loss(&[], &[]), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred: Vec<[f64; 4]> = (0..7)
        .map(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let tgt: Vec<[f64; 4]> = (0..7)
        .map(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let mut brute = 0.0;
    for i in 0..7 {
        for c in 0..4 {
            brute += (pred[i][c] - tgt[i][c]).powi(2);
        }
    }
    assert!((reg_loss(&pred, &tgt) - brute / 28.0).abs() < 1e-12);
}

#[test]
fn detection_losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, k) = (10, 3);
    let labels = random_labels(&mut rng, n, k);
    let positives = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, AnchorLabel::Positive { .. }))
        .map(|(i, _)| {
            (
                i,
                BoxDelta {
                    dx: 0.3,
                    dy: -0.2,
                    dw: 0.5,
                    dh: 0.1,
                },
            )
        })
        .collect();
    let t = ClassTargets { labels, positives };
    let mut store = ParamStore::<f64>::new();
    store
        .add(
            "z",
            Tensor::from_fn([n, k], |_| rng.random_range(-3.0..3.0)),
        )
        .unwrap();
    store
        .add(
            "d",
            Tensor::from_fn([n, 4], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
    for gamma in [0.0, 2.0] {
        let rep = grad_check(
            &mut store,
            |g, s| {
                let z = g.param(s, s.id("z").unwrap());
                let d = g.param(s, s.id("d").unwrap());
                let a = cls_loss_node(g, z, &t, gamma)?;
                let b = reg_loss_node(g, d, &t)?;
                g.weighted_sum(&[(a, 1.0), (b, 1.0)])
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "gamma {gamma}: {rep:?}");
    }
}

fn small_cfg() -> DetectConfig {
    DetectConfig::default()
}

#[test]
fn untrained_head_yields_no_detections() {
    use pageforge_core::backbone::{Backbone, BackboneConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&BackboneConfig::desk(), &mut store, &mut rng).unwrap();
    let cfg = small_cfg();
    let head = DetectHead::new(&cfg, 32, 1, &mut store, &mut rng).unwrap();
    let mut g = Graph::new();
    let img = g.constant(Tensor::from_fn([1, 1, 128, 256], |i| {
        ((i * 7919) % 13) as f32 / 13.0
    }));
    let feats = bb.extract(&mut g, &store, img).unwrap();
    let out = head.forward(&mut g, &store, &feats).unwrap();
    let anchors = cfg.anchors(128, 256).unwrap();
    assert_eq!(g.shape(out.logits), &[anchors.len(), 1]);
    assert_eq!(g.shape(out.deltas), &[anchors.len(), 4]);
    let dets = detect(
        g.value(out.logits).data(),
        g.value(out.deltas).data(),
        1,
        &anchors,
        &cfg,
    )
    .unwrap();
    assert!(dets.is_empty());
}

#[test]
fn scripted_hot_anchor_gives_one_detection() {
    let cfg = small_cfg();
    let anchors = cfg.anchors(128, 128).unwrap();
    let n = anchors.len();
    let hot = 9 * 37 + 2;
    let mut logits = vec![-8.0f64; n * 2];
    logits[hot * 2 + 1] = 4.0;
    let mut deltas = vec![0.0f64; n * 4];
    deltas[hot * 4] = 0.1;
    deltas[hot * 4 + 2] = std::f64::consts::LN_2;
    let dets = detect(&logits, &deltas, 2, &anchors, &cfg).unwrap();
    assert_eq!(dets.len(), 1);
    let a = anchors.anchors[hot].bbox;
    let d = &dets[0];
    assert_eq!((d.anchor, d.class, d.level), (hot, 1, 0));
    assert!((d.bbox.x - (a.x + 0.1 * a.w)).abs() < 1e-12);
    assert!((d.bbox.w - 2.0 * a.w).abs() < 1e-9);
    assert!(d.score >= cfg.score_thresh);
}

#[test]
fn decoded_boxes_have_positive_size() {
    let cfg = DetectConfig {
        score_thresh: 0.0,
        nms_iou: 1.0,
        ..small_cfg()
    };
    let anchors = cfg.anchors(128, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = anchors.len();
    let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let deltas: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-50.0..50.0)).collect();
    for d in detect(&logits, &deltas, 1, &anchors, &cfg).unwrap() {
        assert!(d.bbox.w > 0.0 && d.bbox.h > 0.0 && d.bbox.w.is_finite());
    }
}
