use pageforge_core::detect::{iou, BBox};
use pageforge_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn counts(tp: usize, fp: usize, fn_: usize) -> MetricCounts {
    MetricCounts {
        tp,
        fp,
        fn_,
        matches: vec![],
    }
}

#[test]
fn f1_examples() {
    assert_eq!(f1(&counts(4, 0, 0)), 1.0);
    assert_eq!(f1(&counts(0, 0, 3)), 0.0);
    assert!((f1(&counts(3, 1, 3)) - 0.6).abs() < 1e-12);
    assert_eq!(f1(&counts(0, 0, 0)), 1.0);
    assert_eq!(f1(&counts(0, 2, 0)), 0.0);
}

#[test]
fn cer_examples() {
    assert_eq!(cer("hello", "hello").unwrap(), 0.0);
    assert_eq!(cer("", "abc").unwrap(), 1.0);
    assert!((cer("hallo", "hello").unwrap() - 0.2).abs() < 1e-12);
    assert!(cer("abc", "").is_err());
    assert_eq!(edit_ops("", "abc"), EditOps { i: 0, s: 0, d: 3 });
    assert_eq!(edit_ops("abcd", "abc"), EditOps { i: 1, s: 0, d: 0 });
}

#[test]
fn ap_examples() {
    assert_eq!(
        average_precision(&[(0.9, true), (0.8, true)], 2).unwrap(),
        1.0
    );
    assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert!(average_precision(&[(0.5, false)], 0).is_err());
}

#[test]
fn matching_examples() {
    let g = [
        BBox::new(10.0, 10.0, 10.0, 10.0),
        BBox::new(50.0, 50.0, 10.0, 10.0),
    ];
    let c = match_detections(&g, &g, 0.5);
    assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 0));
    let c = match_detections(&[g[0], g[0]], &g, 0.5);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
    let e = match_entities(&[(g[0], 1), (g[1], 4)], &[(g[0], 1), (g[1], 2)], 4, 0.5);
    assert_eq!((e.tp, e.fp, e.fn_), (1, 0, 1));
    let e = match_entities(&[(g[0], 2)], &[(g[0], 1)], 4, 0.5);
    assert_eq!((e.tp, e.fp, e.fn_), (0, 1, 1));
}

/// Direct transcription of the greedy rule using a precomputed IoU table.
fn reference_match(dets: &[BBox], gts: &[BBox], t: f64) -> (usize, usize, usize) {
    let table: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| iou(d, g)).collect())
        .collect();
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for row in &table {
        let cand = (0..gts.len()).filter(|&j| !used[j] && row[j] >= t).fold(
            None,
            |acc: Option<usize>, j| match acc {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            },
        );
        if let Some(j) = cand {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, dets.len() - tp, gts.len() - tp)
}

#[test]
fn greedy_matching_matches_reference_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let gts: Vec<BBox> = (0..rng.random_range(0..12))
            .map(|_| {
                BBox::new(
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(10.0..50.0),
                    rng.random_range(10.0..30.0),
                )
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            if rng.random_bool(0.7) {
                dets.push(BBox::new(
                    g.x + rng.random_range(-6.0..6.0),
                    g.y + rng.random_range(-4.0..4.0),
                    g.w,
                    g.h,
                ));
            }
        }
        for _ in 0..rng.random_range(0..5) {
            dets.push(BBox::new(
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                20.0,
                15.0,
            ));
        }
        let c = match_detections(&dets, &gts, 0.5);
        assert_eq!((c.tp, c.fp, c.fn_), reference_match(&dets, &gts, 0.5));
        assert!(c.tp <= gts.len());
        let mut m: Vec<usize> = c.matches.iter().flatten().copied().collect();
        m.sort();
        m.dedup();
        assert_eq!(m.len(), c.tp);
    }
}

fn lev(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = lev(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    sub.min(lev(&a[1..], b) + 1).min(lev(a, &b[1..]) + 1)
}

proptest! {
    #[test]
    fn edit_ops_are_minimal(a in "[abc]{0,6}", b in "[abc]{0,6}") {
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        let ops = edit_ops(&a, &b);
        prop_assert_eq!(ops.total(), lev(&ac, &bc));
        prop_assert_eq!(ops.total(), edit_ops(&b, &a).total());
        prop_assert_eq!(ac.len() + ops.d, bc.len() + ops.i);
    }

    #[test]
    fn edit_distance_triangle(a in "[ab]{0,5}", b in "[ab]{0,5}", c in "[ab]{0,5}") {
        let d = |x: &str, y: &str| edit_ops(x, y).total();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
    }

    #[test]
    fn ap_bounded_and_monotone(outcomes in proptest::collection::vec(any::<bool>(), 0..20), extra in 0usize..5) {
        let n_gt = outcomes.iter().filter(|b| **b).count() + extra + 1;
        let recs: Vec<(f64, bool)> = outcomes.iter().enumerate().map(|(i, &b)| (1.0 - i as f64 / 40.0, b)).collect();
        let ap = average_precision(&recs, n_gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut more = recs.clone();
        more.push((2.0, true));
        prop_assert!(average_precision(&more, n_gt).unwrap() >= ap - 1e-12);
    }

    #[test]
    fn f1_bounded_by_twice_min(tp in 0usize..20, fp in 0usize..20, fn_ in 0usize..20) {
        let c = counts(tp, fp, fn_);
        let v = f1(&c);
        if tp + fp > 0 && tp + fn_ > 0 {
            prop_assert!(v <= 2.0 * c.precision().min(c.recall()) + 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
