use genxfer::metrics::{sinkhorn_wasserstein, tv_binned, wasserstein1_sorted, BinRange, Cost, SinkhornConfig, TvConfig};
use genxfer::rng::{self, seeded};
use genxfer::SampleSet;
use proptest::prelude::*;

fn column(v: &[f64]) -> SampleSet {
    SampleSet::from_column(v)
}

#[test]
fn tv_hand_case_is_exact() {
    let cfg = TvConfig {
        n_bins: 2,
        range: BinRange::Fixed(-0.5, 1.5),
    };
    let tv = tv_binned(&column(&[0.0, 0.0, 1.0, 1.0]), &column(&[0.0, 1.0, 1.0, 1.0]), &cfg).unwrap();
    assert_eq!(tv, 0.25);
}

#[test]
fn tv_disjoint_supports() {
    let mut rng = seeded(1);
    let a: Vec<f64> = (0..200).map(|_| rng::uniform(&mut rng, 0.0, 1.0)).collect();
    let b: Vec<f64> = (0..300).map(|_| rng::uniform(&mut rng, 10.0, 11.0)).collect();
    for bins in [2, 7, 50] {
        let cfg = TvConfig {
            n_bins: bins,
            range: BinRange::Auto,
        };
        assert_eq!(tv_binned(&column(&a), &column(&b), &cfg).unwrap(), 1.0);
    }
}

#[test]
fn sinkhorn_two_point_masses() {
    let cfg = SinkhornConfig::default().with_epsilon(0.01);
    let w = sinkhorn_wasserstein(&column(&[0.0]), &column(&[3.0]), &cfg).unwrap();
    assert!((w.cost - 3.0).abs() <= 0.02, "{}", w.cost);
}

#[test]
fn sinkhorn_matches_sorted_w1_on_fifty_cases() {
    let mut rng = seeded(2024);
    let cfg = SinkhornConfig {
        epsilon: 1e-3,
        max_iters: 20_000,
        tol: 1e-6,
        ..SinkhornConfig::default()
    };
    for case in 0..50 {
        let n = 5 + case % 20;
        let shift = rng::uniform(&mut rng, -2.0, 2.0);
        let a: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| shift + 1.5 * rng::normal(&mut rng)).collect();
        let exact = wasserstein1_sorted(&a, &b).unwrap();
        let w = sinkhorn_wasserstein(&column(&a), &column(&b), &cfg).unwrap();
        assert!((w.cost - exact).abs() <= 1e-2, "case {case}: {} vs {exact}", w.cost);
    }
}

#[test]
fn self_transport_shrinks_with_epsilon() {
    let mut rng = seeded(3);
    let pts = SampleSet::new(ndarray::Array2::from_shape_fn((40, 2), |_| rng::normal(&mut rng)));
    let mut last = f64::INFINITY;
    for eps in [0.1, 0.01, 0.001] {
        let w = sinkhorn_wasserstein(&pts, &pts, &SinkhornConfig::default().with_epsilon(eps)).unwrap().cost;
        assert!(w < 2.0 * eps, "eps {eps}: {w}");
        assert!(w <= last);
        last = w;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tv_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..60),
        b in prop::collection::vec(-5.0f64..5.0, 1..60),
        bins in 1usize..40,
    ) {
        let cfg = TvConfig { n_bins: bins, range: BinRange::Auto };
        let ab = tv_binned(&column(&a), &column(&b), &cfg).unwrap();
        let ba = tv_binned(&column(&b), &column(&a), &cfg).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn sinkhorn_ignores_row_order(seed in any::<u64>(), sq in any::<bool>()) {
        let mut rng = seeded(seed);
        let a = SampleSet::new(ndarray::Array2::from_shape_fn((25, 3), |_| rng::normal(&mut rng)));
        let b = SampleSet::new(ndarray::Array2::from_shape_fn((30, 3), |_| 0.5 + rng::normal(&mut rng)));
        let perm = rng::permutation(&mut rng, 30);
        let cfg = SinkhornConfig {
            cost: if sq { Cost::SqEuclidean } else { Cost::Euclidean },
            tol: 1e-9,
            max_iters: 50_000,
            ..SinkhornConfig::default()
        };
        let w = sinkhorn_wasserstein(&a, &b, &cfg).unwrap().cost;
        let wp = sinkhorn_wasserstein(&a, &b.select_rows(&perm), &cfg).unwrap().cost;
        let wq = sinkhorn_wasserstein(&b.select_rows(&perm), &a, &cfg).unwrap().cost;
        prop_assert!((w - wp).abs() < 1e-10, "{} vs {}", w, wp);
        prop_assert!((w - wq).abs() < 1e-6, "{} vs {}", w, wq);
    }
}

#[test]
fn empty_inputs_are_errors() {
    let e = SampleSet::empty(1);
    assert!(tv_binned(&e, &column(&[1.0]), &TvConfig::default()).is_err());
    assert!(sinkhorn_wasserstein(&e, &column(&[1.0]), &SinkhornConfig::default()).is_err());
    assert!(sinkhorn_wasserstein(&column(&[1.0]), &SampleSet::empty(2), &SinkhornConfig::default()).is_err());
}
