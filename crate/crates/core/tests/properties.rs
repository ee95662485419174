use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resbench::ipc::{count_basis, enumerate_multi_indices, legendre_eval};
use resbench::mackey_glass::{rescale, TimeSeries};
use resbench::metrics::{median, median_mad, mse, valid_prediction_time};
use resbench::reservoir::{init_input_matrix, InputMatrix, ReservoirState};
use resbench::topology::{
    build_connectivity, build_topology, build_weight_matrix, compose_reservoir, degree_distribution,
    ConnectivityKind, Symmetry, TopologyKind,
};

fn kind_strategy() -> impl Strategy<Value = TopologyKind> {
    prop::sample::select(TopologyKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weights_live_on_the_connection_support(kind in kind_strategy(), seed in any::<u64>()) {
        let n = 40;
        let density = 0.2;
        let conn = kind.connectivity(n, density, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = build_connectivity(conn, n, density, &mut rng).unwrap();
        let wc = build_weight_matrix(&a, kind.weight_symmetry(), &mut rng).unwrap();
        for i in 0..n {
            prop_assert!(!a.get(i, i));
            for j in 0..n {
                if !a.get(i, j) {
                    prop_assert_eq!(wc.get(i, j), 0.0);
                } else {
                    prop_assert!((-0.5..=0.5).contains(&wc.get(i, j)));
                }
            }
        }
        if conn.is_symmetric() {
            prop_assert!(a.is_symmetric());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn symmetric_kinds_give_symmetric_recurrence(seed in any::<u64>()) {
        for kind in [TopologyKind::RandomSymSymWeights, TopologyKind::WattsStrogatzSymWeights] {
            let topo = build_topology(
                kind, 64, 0.125, 0.7, 1.25,
                &mut ChaCha8Rng::seed_from_u64(seed),
                &mut ChaCha8Rng::seed_from_u64(seed ^ 1),
            ).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    prop_assert_eq!(topo.w[(i, j)], topo.w[(j, i)]);
                }
            }
        }
        let ra = build_topology(
            TopologyKind::RandomAsym, 64, 0.125, 0.0, 1.25,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut ChaCha8Rng::seed_from_u64(seed ^ 1),
        ).unwrap();
        let asym = (0..64).any(|i| (0..64).any(|j| ra.w[(i, j)] != ra.w[(j, i)]));
        prop_assert!(asym);
    }

    #[test]
    fn radius_scaling_is_linear(kind in kind_strategy(), seed in any::<u64>()) {
        let n = 48;
        let density = 1.0 / 6.0;
        let conn = kind.connectivity(n, density, 0.3).unwrap();
        let a = build_connectivity(conn, n, density, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let wc = build_weight_matrix(&a, kind.weight_symmetry(), &mut ChaCha8Rng::seed_from_u64(!seed)).unwrap();
        let one = compose_reservoir(&a, &wc, 1.25).unwrap();
        let two = compose_reservoir(&a, &wc, 2.5).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(two.w[(i, j)], 2.0 * one.w[(i, j)]);
            }
        }
        let rho = resbench::topology::spectral_radius(&one.w).unwrap();
        prop_assert!((rho - 1.25).abs() <= 1.25e-6);
    }

    #[test]
    fn same_seed_same_matrices(kind in kind_strategy(), seed in any::<u64>()) {
        let build = || build_topology(
            kind, 50, 0.16, 0.4, 1.25,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        ).unwrap();
        let (a, b) = (build(), build());
        prop_assert_eq!(&a.connectivity, &b.connectivity);
        prop_assert_eq!(&a.weights, &b.weights);
        prop_assert!(a.w == b.w);
    }

    #[test]
    fn rewiring_conserves_edges(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let (n, k) = (60, 6);
        let conn = ConnectivityKind::WattsStrogatz { p, k };
        let a = build_connectivity(conn, n, k as f64 / n as f64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.nnz(), n * k);
        prop_assert!(a.is_symmetric());
        if p == 0.0 {
            let h = degree_distribution(&a);
            prop_assert_eq!(h.in_counts.into_iter().collect::<Vec<_>>(), vec![(k, n)]);
        }
    }

    #[test]
    fn states_stay_in_the_unit_box(seed in any::<u64>(), eps in 0.05f64..=1.0) {
        let topo = build_topology(
            TopologyKind::RandomAsym, 32, 0.25, 0.0, 3.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut ChaCha8Rng::seed_from_u64(seed ^ 7),
        ).unwrap();
        let w_in = init_input_matrix(32, 1, 4.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 9)).unwrap();
        let mut state = ReservoirState::zeros(32);
        for t in 0..200 {
            let u = ((t as f64) * 0.37).sin() * 5.0;
            state = resbench::reservoir::step(&state, &[u], &topo.w, &w_in, eps).unwrap();
            prop_assert!(state.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mse_translation_identity(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..60),
        c in -5.0f64..5.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let mean_diff = p.iter().zip(&t).map(|(a, b)| a - b).sum::<f64>() / p.len() as f64;
        let lhs = mse(&shifted, &t).unwrap();
        let rhs = mse(&p, &t).unwrap() + 2.0 * c * mean_diff + c * c;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tighter_threshold_never_extends_vpt(
        nmse in prop::collection::vec(0.0f64..1.0, 1..300),
        lo in 0.01f64..0.5,
        extra in 0.0f64..0.5,
    ) {
        let tight = valid_prediction_time(&nmse, 0.007, 1.0, lo).unwrap();
        let loose = valid_prediction_time(&nmse, 0.007, 1.0, lo + extra).unwrap();
        prop_assert!(tight <= loose);
    }

    #[test]
    fn median_is_permutation_invariant(
        mut xs in prop::collection::vec(-100.0f64..100.0, 1..40),
        seed in any::<u64>(),
    ) {
        let before = median_mad(&xs).unwrap();
        use rand::seq::SliceRandom;
        xs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(median_mad(&xs).unwrap(), before);
    }

    #[test]
    fn one_outlier_moves_median_at_most_one_rank(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
        idx in any::<prop::sample::Index>(),
        sign in prop::bool::ANY,
    ) {
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let m = median(&xs).unwrap();
        let mut ys = xs.clone();
        ys[idx.index(xs.len())] = if sign { 1e6 } else { -1e6 };
        let m2 = median(&ys).unwrap();
        // the median can only slide to an adjacent order statistic
        let n = sorted.len();
        let lo = sorted[((n - 1) / 2).saturating_sub(1)];
        let hi = sorted[(n / 2 + 1).min(n - 1)];
        prop_assert!(m2 >= lo - 1e-12 && m2 <= hi + 1e-12, "{m} -> {m2} outside [{lo}, {hi}]");
    }

    #[test]
    fn rescale_maps_to_unit_interval(xs in prop::collection::vec(-50.0f64..50.0, 2..100)) {
        prop_assume!(xs.iter().any(|&v| v != xs[0]));
        let (scaled, map) = rescale(&TimeSeries::new(xs.clone(), 1.0)).unwrap();
        let (lo, hi) = scaled.min_max().unwrap();
        prop_assert_eq!((lo, hi), (-1.0, 1.0));
        for (x, y) in xs.iter().zip(&scaled.values) {
            prop_assert!((map.invert(*y) - x).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn legendre_is_bounded_and_parity_definite(alpha in 0u32..=5, x in -1.0f64..=1.0) {
        let p = legendre_eval(alpha, x);
        prop_assert!(p.abs() <= 1.0 + 1e-12);
        let sign = if alpha % 2 == 0 { 1.0 } else { -1.0 };
        prop_assert!((legendre_eval(alpha, -x) - sign * p).abs() <= 1e-14);
    }

    #[test]
    fn basis_count_matches_enumeration(d in 1u32..=5, j in 0usize..=12) {
        prop_assert_eq!(count_basis(d, j), enumerate_multi_indices(d, j).len() as u128);
    }
}

#[test]
fn weight_symmetry_requires_symmetric_support() {
    let a = build_connectivity(ConnectivityKind::RandomAsym, 20, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(build_weight_matrix(&a, Symmetry::Symmetric, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
}

#[test]
fn input_matrix_shape_errors() {
    assert!(InputMatrix::from_entries(3, 1, vec![0.0; 2]).is_err());
}
