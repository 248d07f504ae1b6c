use pageforge_core::detect::{BBox, Detection};
use pageforge_core::gradcheck::grad_check;
use pageforge_core::ner::*;
use pageforge_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tag_set_contract() {
    let t = TagSet::default();
    assert_eq!(t.len(), 5);
    assert_eq!(t.name(t.other()), "other");
    assert!(TagSet::new(&["name", "date"]).is_err());
    assert!(TagSet::new(&["other", "name", "other"]).is_err());
}

#[test]
fn reading_order_examples() {
    let b = |x, y| BBox::new(x, y, 30.0, 10.0);
    let r = reading_order(&[b(10.0, 10.0), b(60.0, 12.0), b(10.0, 50.0)]);
    assert_eq!(r.order, vec![0, 1, 2]);
    assert_eq!(r.line_of, vec![0, 0, 1]);
    assert_eq!(reading_order(&[b(5.0, 5.0)]).order, vec![0]);
    assert!(reading_order(&[]).order.is_empty());
    // topmost box sits mid-line: the words to its left still join its line
    let r = reading_order(&[b(100.0, 31.0), b(50.0, 30.0), b(10.0, 32.0), b(10.0, 60.0)]);
    assert_eq!(r.order, vec![2, 1, 0, 3]);
}

proptest! {
    #[test]
    fn grid_order_is_row_major(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let jitter_y = rng.random_range(-2.0..2.0);
                boxes.push(BBox::new(20.0 + 50.0 * c as f64, 15.0 + 30.0 * r as f64 + jitter_y, 40.0, 12.0));
            }
        }
        let mut perm: Vec<usize> = (0..boxes.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let order = reading_order(&shuffled).order;
        let mapped: Vec<usize> = order.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(mapped, (0..boxes.len()).collect::<Vec<_>>());
    }

    #[test]
    fn reading_order_is_a_permutation(seed in 0u64..5000, n in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<BBox> = (0..n).map(|_| BBox::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(5.0..60.0), rng.random_range(5.0..30.0))).collect();
        let r = reading_order(&boxes);
        let mut o = r.order.clone();
        o.sort();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
        for w in r.order.windows(2) {
            if r.line_of[w[0]] == r.line_of[w[1]] {
                prop_assert!(boxes[w[0]].x < boxes[w[1]].x);
            }
        }
    }
}

#[test]
fn tags_from_classification() {
    let d = |class| Detection {
        bbox: BBox::new(1.0, 1.0, 1.0, 1.0),
        score: 0.9,
        class,
        level: 0,
        anchor: 0,
    };
    assert_eq!(tag_from_classification(&[d(3), d(0), d(4)]), vec![3, 0, 4]);
    assert!(tag_from_classification(&[]).is_empty());
}

fn tagger(store: &mut ParamStore<f64>, c: usize, pw: usize, max_len: usize) -> SeqTagger {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = NerConfig {
        max_len,
        hidden: 6,
        kernel: 3,
    };
    SeqTagger::new(&cfg, c * pw, 5, store, &mut rng).unwrap()
}

fn logits_for(
    store: &ParamStore<f64>,
    t: &SeqTagger,
    pooled: &Tensor<f64>,
    order: &[usize],
) -> Vec<f64> {
    let mut g = Graph::new();
    let p = g.constant(pooled.clone());
    let out = t.forward(&mut g, store, p, order).unwrap();
    g.value(out.logits).data().to_vec()
}

#[test]
fn single_box_gives_one_row() {
    let mut store = ParamStore::new();
    let t = tagger(&mut store, 2, 4, 8);
    let mut g = Graph::new();
    let p = g.constant(Tensor::full([1, 2, 3, 4], 0.5));
    let out = t.forward(&mut g, &store, p, &[0]).unwrap();
    assert_eq!(g.shape(out.logits), &[1, 5]);
    assert_eq!(out.truncated, 0);
}

#[test]
fn permuted_boxes_with_matching_order_give_same_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let t = tagger(&mut store, 2, 4, 8);
    let pooled = Tensor::from_fn([5, 2, 3, 4], |_| rng.random_range(-1.0..1.0));
    let order = [2, 0, 4, 1, 3];
    let base = logits_for(&store, &t, &pooled, &order);
    let perm = [3, 1, 4, 0, 2]; // new position -> old box
    let per_box = 2 * 3 * 4;
    let mut data = Vec::new();
    for &old in &perm {
        data.extend_from_slice(&pooled.data()[old * per_box..(old + 1) * per_box]);
    }
    let permuted = Tensor::new([5, 2, 3, 4], data).unwrap();
    let new_order: Vec<usize> = order
        .iter()
        .map(|o| perm.iter().position(|p| p == o).unwrap())
        .collect();
    assert_eq!(logits_for(&store, &t, &permuted, &new_order), base);
}

#[test]
fn logits_depend_only_on_two_neighbours_each_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let t = tagger(&mut store, 2, 4, 16);
    let n = 12;
    let pooled = Tensor::from_fn([n, 2, 3, 4], |_| rng.random_range(-1.0..1.0));
    let order: Vec<usize> = (0..n).collect();
    let base = logits_for(&store, &t, &pooled, &order);
    let per_box = 2 * 3 * 4;
    for j in 0..n {
        let mut z = pooled.clone();
        z.data_mut()[j * per_box..(j + 1) * per_box]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let out = logits_for(&store, &t, &z, &order);
        for i in 0..n {
            let same = out[i * 5..(i + 1) * 5] == base[i * 5..(i + 1) * 5];
            if (i as isize - j as isize).abs() > 2 {
                assert!(same, "position {i} changed after zeroing {j}");
            }
        }
    }
}

#[test]
fn overlong_page_is_truncated() {
    let mut store = ParamStore::new();
    let t = tagger(&mut store, 1, 2, 4);
    let mut g = Graph::new();
    let p = g.constant(Tensor::full([6, 1, 2, 2], 1.0));
    let out = t.forward(&mut g, &store, p, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!(g.shape(out.logits), &[4, 5]);
    assert_eq!(out.truncated, 2);
}

#[test]
fn sequential_head_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let t = tagger(&mut store, 2, 3, 6);
    store
        .add(
            "pooled",
            Tensor::from_fn([4, 2, 2, 3], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
    let targets = [Some(1), Some(4), None, Some(0)];
    let rep = grad_check(
        &mut store,
        |g, s| {
            let p = g.param(s, s.id("pooled").unwrap());
            let out = t.forward(g, s, p, &[3, 1, 0, 2])?;
            tag_loss(g, out.logits, &targets)
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn word_classifier_is_deterministic_and_context_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f32>::new();
    let cfg = WordClassifierConfig::default();
    let clf = WordClassifier::new(&cfg, 5, &mut store, &mut rng).unwrap();
    let page: Vec<f32> = (0..64 * 128).map(|_| rng.random_range(0.0..1.0)).collect();
    let word = BBox::new(40.0, 20.0, 50.0, 16.0);
    let others = [
        BBox::new(100.0, 20.0, 30.0, 16.0),
        BBox::new(60.0, 50.0, 40.0, 16.0),
    ];
    let run = |boxes: &[BBox]| {
        let crops = word_crops(&page, 64, 128, boxes, &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([boxes.len(), 1, cfg.crop_h, cfg.crop_w], crops).unwrap());
        let y = clf.forward(&mut g, &store, x).unwrap();
        argmax_rows(g.value(y).data(), 5)
    };
    let alone = run(&[word, word]);
    assert_eq!(alone[0], alone[1]);
    assert_eq!(run(&[word, others[0], others[1]])[0], alone[0]);
    assert_eq!(run(&[others[1], others[0], word])[2], alone[0]);
    assert!(crop_resize(&page, 64, 128, &BBox::new(500.0, 500.0, 5.0, 5.0), 4, 4).is_err());
}
