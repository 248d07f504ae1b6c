use pageforge_core::gradcheck::grad_check;
use pageforge_core::recog::*;
use pageforge_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn collapse_examples() {
    assert_eq!(collapse("hheeel-llo"), "hello");
    assert_eq!(collapse("---"), "");
    assert_eq!(collapse("aa-aa"), "aa");
    assert_eq!(collapse_classes(&[1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
}

fn one_hot_lattice(alpha: &Alphabet, path: &str) -> Vec<f64> {
    let k = alpha.num_classes();
    let mut v = vec![(1e-3f64).ln(); path.chars().count() * k];
    for (t, c) in path.chars().enumerate() {
        let cls = if c == BLANK_CHAR {
            0
        } else {
            alpha.encode(&c.to_string()).unwrap()[0]
        };
        v[t * k + cls] = 0.0;
    }
    v
}

#[test]
fn greedy_decode_fixtures() {
    let a = Alphabet::default_latin();
    let k = a.num_classes();
    let hello = one_hot_lattice(&a, "hh-ee-ll-lloo------");
    assert_eq!(a.decode(&greedy_decode(&hello, k)), "hello");
    assert_eq!(
        a.decode(&greedy_decode(&one_hot_lattice(&a, "--------"), k)),
        ""
    );
    assert_eq!(
        a.decode(&greedy_decode(&one_hot_lattice(&a, "-c-a--t-"), k)),
        "cat"
    );
}

#[test]
fn alphabet_contract() {
    let a = Alphabet::default_latin();
    assert_eq!(a.num_classes(), 37);
    assert_eq!(a.encode("ab9").unwrap(), vec![1, 2, 36]);
    assert!(a.encode("A").is_err());
    assert!(Alphabet::new("ab-").is_err());
    assert_eq!(a.decode(&a.encode("pageforge").unwrap()), "pageforge");
}

#[test]
fn single_path_and_two_frame_examples() {
    // T=1, one symbol, p(a)=0.7
    let l = [0.3f64.ln(), 0.7f64.ln()];
    let r = ctc_loss(&l, 2, &[1]).unwrap();
    assert!((r.loss + 0.7f64.ln()).abs() < 1e-12);
    // T=2: p = a.a + a.- + -.a
    let (p1, p2) = (0.6f64, 0.3f64);
    let l = [(1.0 - p1).ln(), p1.ln(), (1.0 - p2).ln(), p2.ln()];
    let p = p1 * p2 + p1 * (1.0 - p2) + (1.0 - p1) * p2;
    assert!((ctc_loss(&l, 2, &[1]).unwrap().loss + p.ln()).abs() < 1e-12);
}

#[test]
fn infeasible_target_gives_sentinel() {
    let l = vec![0.5f64.ln(); 3 * 2];
    let r = ctc_loss(&l, 2, &[1, 1]).unwrap();
    assert!(r.feasible);
    let r = ctc_loss(&l[..4], 2, &[1, 1]).unwrap();
    assert!(!r.feasible);
    assert_eq!(r.loss, CTC_INFEASIBLE_LOSS);
    assert!(r.grad.iter().all(|g| *g == 0.0));
    let mut g = Graph::<f64>::new();
    let lat = g.constant(Tensor::new([1, 2, 2], l[..4].to_vec()).unwrap());
    let mut stats = CtcStats::default();
    ctc_loss_node(&mut g, lat, &[vec![1, 1]], &mut stats).unwrap();
    assert_eq!(
        stats,
        CtcStats {
            evaluated: 1,
            infeasible: 1
        }
    );
}

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        v.extend(row.iter().map(|x| x - lse));
    }
    v
}

/// -ln of the summed probability of every length-T path that collapses to `target`.
fn exhaustive(lattice: &[f64], k: usize, target: &[usize]) -> f64 {
    let t = lattice.len() / k;
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse_classes(&path) == target {
            total += (0..t).map(|i| lattice[i * k + path[i]]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn dp_matches_exhaustive_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let k = rng.random_range(2..=4); // 1..=3 symbols plus blank
        let len = rng.random_range(0..=2);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..k)).collect();
        let t = rng.random_range(min_frames(&target).max(1)..=6);
        let l = random_lattice(&mut rng, t, k);
        let r = ctc_loss(&l, k, &target).unwrap();
        assert!((r.loss - exhaustive(&l, k, &target)).abs() < 1e-9);
        assert!(r.loss >= 0.0);
    }
}

#[test]
fn ctc_mini_net_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::<f64>::new();
    store
        .add(
            "x",
            Tensor::from_fn([2, 6, 3], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
    store
        .add(
            "w",
            Tensor::from_fn([3, 4], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
    store
        .add("b", Tensor::from_fn([4], |_| rng.random_range(-0.5..0.5)))
        .unwrap();
    let targets = vec![vec![1, 2], vec![3, 3]];
    let rep = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let z = g.linear(x, w, Some(b))?;
            let lp = g.log_softmax(z, 2)?;
            ctc_loss_node(g, lp, &targets, &mut CtcStats::default())
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn certain_path_gives_zero_loss() {
    let a = Alphabet::default_latin();
    let l: Vec<f64> = one_hot_lattice(&a, "-c-a-t-")
        .iter()
        .map(|v| if *v == 0.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let r = ctc_loss(&l, a.num_classes(), &a.encode("cat").unwrap()).unwrap();
    assert_eq!(r.loss, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_decode_ignores_row_rescaling(seed in 0u64..10_000, t in 1usize..12, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_lattice(&mut rng, t, k);
        let mut scaled = l.clone();
        for row in scaled.chunks_mut(k) {
            // positive rescaling of probabilities, then renormalisation
            let c: f64 = rng.random_range(0.1..10.0f64).ln();
            let lse = row.iter().map(|x| (x + c).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x = *x + c - lse);
        }
        prop_assert_eq!(greedy_decode(&l, k), greedy_decode(&scaled, k));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..=4);
        let target: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..k)).collect();
        let t = rng.random_range(min_frames(&target)..=7);
        let l = random_lattice(&mut rng, t, k);
        let r = ctc_loss(&l, k, &target).unwrap();
        for i in 0..l.len() {
            let mut p = l.clone();
            p[i] += 1e-6;
            let mut m = l.clone();
            m[i] -= 1e-6;
            let num = (ctc_loss(&p, k, &target).unwrap().loss - ctc_loss(&m, k, &target).unwrap().loss) / 2e-6;
            let denom = 1e-3f64.max(num.abs()).max(r.grad[i].abs());
            prop_assert!((num - r.grad[i]).abs() / denom < 1e-3);
        }
    }
}

#[test]
fn recognition_head_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let a = Alphabet::default_latin();
    let head = RecogHead::new(
        &RecogConfig {
            channels: 8,
            conv_blocks: 2,
        },
        4,
        a.num_classes(),
        &mut store,
        &mut rng,
    )
    .unwrap();
    let one = Tensor::from_fn([1, 4, 8, 32], |_| rng.random_range(-1.0..1.0));
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2, 4, 8, 32], data).unwrap());
    let y = head.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[2, 32, 37]);
    let v = g.value(y).data();
    for row in v.chunks(37) {
        let s: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert_eq!(&v[..32 * 37], &v[32 * 37..]);
}
