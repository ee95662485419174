//! Cross-checks against independent reference computations.

use std::collections::BTreeMap;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resbench::experiment::{
    aggregate, derive_seed, emit_results, read_results_csv, read_results_json, run_benchmark,
    run_ipc_suite, AggregateRow, BenchMode, ExperimentConfig, OutputFormat, ResultRow,
    ResultsTable, SeedRole, Suite,
};
use resbench::ipc::{
    basis_target, capacity, compute_ipc, compute_ipc_with_inputs, random_inputs, IpcOptions,
    IpcSchedule, StateStorage, ThresholdMode,
};
use resbench::mackey_glass::{generate_with_history, MackeyGlassParams};
use resbench::reservoir::{
    collect_states, init_input_matrix, open_loop_from, predict_closed_loop, train_readout,
    InputMatrix, ReservoirConfig,
};
use resbench::topology::{build_topology, ReservoirTopology, TopologyKind};

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    // Gaussian elimination with partial pivoting
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            let pivot_row = a[c].clone();
            for (x, p) in a[r][c..].iter_mut().zip(&pivot_row[c..]) {
                *x -= f * p;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn ridge_matches_reference_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, n, gamma) = (60, 7, 0.05);
    let r = Mat::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
    let u = Mat::from_fn(rows, 1, |_, _| rng.random_range(-1.0..1.0));
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..rows).map(|t| r[(t, i)] * r[(t, j)]).sum::<f64>() + if i == j { gamma } else { 0.0 })
                .collect()
        })
        .collect();
    let b: Vec<f64> = (0..n).map(|i| (0..rows).map(|t| r[(t, i)] * u[(t, 0)]).sum()).collect();
    let expect = solve_dense(a, b);
    let got = train_readout(&r, &u, gamma).unwrap();
    for (j, e) in expect.iter().enumerate() {
        assert!((got.w_out[(0, j)] - e).abs() < 1e-10);
    }

    // the regularized objective is stationary at the solution
    let objective = |w: &[f64]| -> f64 {
        let fit: f64 = (0..rows)
            .map(|t| (u[(t, 0)] - (0..n).map(|j| r[(t, j)] * w[j]).sum::<f64>()).powi(2))
            .sum();
        fit + gamma * w.iter().map(|v| v * v).sum::<f64>()
    };
    let w: Vec<f64> = (0..n).map(|j| got.w_out[(0, j)]).collect();
    let base = objective(&w);
    for _ in 0..20 {
        let moved: Vec<f64> = w.iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)).collect();
        assert!(objective(&moved) >= base * (1.0 - 1e-6));
    }
}

#[test]
fn mackey_glass_is_second_order_in_dt() {
    // smooth history; compare integer-time samples over the first 50 time units
    let run = |dt: f64| {
        let params = MackeyGlassParams {
            dt,
            transient_steps: 0,
            ..MackeyGlassParams::default()
        };
        generate_with_history(&params, 51, |t| 0.9 + 0.2 * (t / 5.0).sin()).unwrap().values
    };
    let base = 0.017;
    let (a, b, c) = (run(base), run(base / 2.0), run(base / 4.0));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let ratio = diff(&a, &b) / diff(&b, &c);
    assert!((3.0..5.0).contains(&ratio), "refinement ratio {ratio}");
}

fn small_reservoir(kind: TopologyKind, n: usize, seed: u64) -> (ReservoirTopology, InputMatrix) {
    let topo = build_topology(
        kind,
        n,
        8.0 / n as f64,
        1.0,
        1.25,
        &mut ChaCha8Rng::seed_from_u64(seed),
        &mut ChaCha8Rng::seed_from_u64(seed + 100),
    )
    .unwrap();
    let w_in = init_input_matrix(n, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 200)).unwrap();
    (topo, w_in)
}

#[test]
fn open_and_closed_loop_agree_on_first_step() {
    let cfg = ReservoirConfig {
        n_r: 64,
        density: 0.125,
        n0: 100,
        n1: 400,
        n2: 50,
        ..ReservoirConfig::default()
    };
    let (topo, w_in) = small_reservoir(TopologyKind::RandomAsym, 64, 3);
    let params = MackeyGlassParams {
        transient_steps: 20_000,
        ..MackeyGlassParams::default()
    };
    let raw = generate_with_history(&params, cfg.required_drive_len(), |_| 0.8).unwrap();
    let drive = resbench::mackey_glass::rescale(&raw).unwrap().0;
    let collected = collect_states(&topo, &w_in, &drive, &cfg).unwrap();
    let readout = train_readout(&collected.states, &collected.targets, cfg.gamma).unwrap();
    let start = cfg.n0 + cfg.n1;
    let open = open_loop_from(
        &readout,
        &topo,
        &w_in,
        &collected.final_state,
        &drive.values[start..start + cfg.n2],
        &cfg,
    )
    .unwrap();
    let closed = predict_closed_loop(
        &readout,
        &topo,
        &w_in,
        &collected.final_state,
        drive.values[start],
        cfg.n2,
        &cfg,
    )
    .unwrap();
    assert_eq!(open[0], closed[0]);
    assert_eq!(closed.len(), cfg.n2);
}

#[test]
fn basis_target_matches_hand_evaluation() {
    let xi = [0.2, 0.5, -0.3, 0.8, 0.1];
    let n = resbench::ipc::MultiIndex::new(vec![(0, 1), (2, 2)]).unwrap();
    let t = basis_target(&n, &xi, 0).unwrap();
    // index 3: xi[3] = 0.8 and xi[1] = 0.5, P2(0.5) = -0.125
    assert!((t[1] - 0.8 * -0.125).abs() < 1e-15);
    let t = basis_target(&n, &xi, 4).unwrap();
    assert_eq!(t.len(), 1);
}

#[test]
fn memoryless_reservoir_has_no_delayed_capacity() {
    let n = 8;
    let topo = ReservoirTopology::from_matrix(Mat::zeros(n, n)).unwrap();
    let w_in = init_input_matrix(n, 1, 0.9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = ReservoirConfig {
        n_r: n,
        epsilon: 1.0,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: vec![(1, 10), (2, 5), (3, 3)],
        n_inputs: 50_000,
        threshold: 1e-3,
        washout: 10,
    };
    let profile = compute_ipc(
        &topo,
        &w_in,
        &schedule,
        &cfg,
        &IpcOptions::default(),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    for list in profile.top.values() {
        for c in list {
            assert_eq!(c.index.max_delay(), 0, "{} kept with {}", c.index, c.capacity);
        }
    }
    // odd activations of a single input reproduce P1 almost perfectly
    assert!(profile.per_degree[&1] > 0.99);
    assert!(profile.total <= n as f64 + 1e-6);
}

#[test]
fn streaming_matches_in_memory() {
    let (topo, w_in) = small_reservoir(TopologyKind::RandomAsym, 24, 11);
    let cfg = ReservoirConfig {
        n_r: 24,
        density: 8.0 / 24.0,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: vec![(1, 30), (2, 8), (3, 4)],
        n_inputs: 20_000,
        threshold: 1e-4,
        washout: 50,
    };
    let xi = random_inputs(schedule.n_inputs, &mut ChaCha8Rng::seed_from_u64(4));
    let run = |storage| {
        let opts = IpcOptions {
            storage,
            basis_chunk: 17,
            ..IpcOptions::default()
        };
        compute_ipc_with_inputs(&topo, &w_in, &schedule, &cfg, &opts, &xi, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    };
    let mem = run(StateStorage::InMemory);
    let stream = run(StateStorage::Streaming { block: 777 });
    for (d, v) in &mem.per_degree {
        assert!((v - stream.per_degree[d]).abs() < 1e-10, "degree {d}: {v} vs {}", stream.per_degree[d]);
    }
    for (d, list) in &mem.top {
        for (a, b) in list.iter().zip(&stream.top[d]) {
            assert_eq!(a.index, b.index);
            assert!((a.capacity - b.capacity).abs() < 1e-10);
        }
    }
    assert!(mem.top.values().flatten().all(|c| (0.0..=1.0).contains(&c.capacity)));
}

#[test]
fn batched_capacities_match_single_target_fits() {
    let (topo, w_in) = small_reservoir(TopologyKind::RandomSymAsymWeights, 16, 2);
    let cfg = ReservoirConfig {
        n_r: 16,
        density: 0.5,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: vec![(1, 6), (2, 3)],
        n_inputs: 5_000,
        threshold: 0.0,
        washout: 20,
    };
    let xi = random_inputs(schedule.n_inputs, &mut ChaCha8Rng::seed_from_u64(9));
    let opts = IpcOptions {
        keep_top: usize::MAX,
        ..IpcOptions::default()
    };
    let profile =
        compute_ipc_with_inputs(&topo, &w_in, &schedule, &cfg, &opts, &xi, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    // reference: drive the reservoir by hand and fit each target separately
    let first = schedule.first_row();
    let mut r = resbench::reservoir::ReservoirState::zeros(16);
    let mut states = Mat::zeros(xi.len() - first, 16);
    for (k, u) in xi.iter().enumerate() {
        r = resbench::reservoir::step(&r, &[*u], &topo.w, &w_in, cfg.epsilon).unwrap();
        if k >= first {
            for j in 0..16 {
                states[(k - first, j)] = r.0[j];
            }
        }
    }
    for c in profile.top.values().flatten().take(40) {
        let target = basis_target(&c.index, &xi, first).unwrap();
        let reference = capacity(states.as_ref(), &target, cfg.gamma).unwrap();
        assert!((reference - c.capacity).abs() < 1e-9, "{}: {reference} vs {}", c.index, c.capacity);
    }
}

#[test]
fn surrogate_threshold_is_positive_and_small() {
    let (topo, w_in) = small_reservoir(TopologyKind::RandomAsym, 32, 6);
    let cfg = ReservoirConfig {
        n_r: 32,
        density: 0.25,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: vec![(1, 40), (2, 10)],
        n_inputs: 30_000,
        threshold: 1e-4,
        washout: 100,
    };
    let opts = IpcOptions {
        threshold_mode: ThresholdMode::Surrogate { count: 10, safety: 1.2 },
        ..IpcOptions::default()
    };
    let p = compute_ipc(&topo, &w_in, &schedule, &cfg, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // shifted targets carry only finite-sample capacity, of order n / rows
    assert!(p.threshold_used > 0.0 && p.threshold_used < 20.0 * 32.0 / schedule.rows() as f64);
    assert!(p.total <= 32.0 + 1e-6);
}

#[test]
fn in_memory_refuses_oversized_state_matrices() {
    let (topo, w_in) = small_reservoir(TopologyKind::RandomAsym, 16, 1);
    let cfg = ReservoirConfig {
        n_r: 16,
        density: 0.5,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: vec![(1, 5)],
        n_inputs: 10_000,
        threshold: 1e-4,
        washout: 10,
    };
    let opts = IpcOptions {
        memory_limit_bytes: 1024,
        ..IpcOptions::default()
    };
    let err = compute_ipc(&topo, &w_in, &schedule, &cfg, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, resbench::Error::Resource(_)));
}

#[test]
fn derived_seeds_do_not_collide() {
    let mut seen = std::collections::HashSet::new();
    let roles = [
        SeedRole::Connectivity,
        SeedRole::Weights,
        SeedRole::Input,
        SeedRole::Series,
        SeedRole::IpcInput,
    ];
    let ps: Vec<Option<f64>> = std::iter::once(None).chain((1..=10).map(|i| Some(i as f64 / 10.0))).collect();
    for kind in TopologyKind::ALL {
        for p in &ps {
            for member in 0..100 {
                for role in roles {
                    assert!(seen.insert(derive_seed(42, kind, *p, member, role)));
                }
            }
        }
    }
    assert_eq!(seen.len(), 5 * 11 * 100 * 5);
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.reservoir.n_r = 48;
    cfg.reservoir.density = 1.0 / 6.0;
    cfg.reservoir.n0 = 100;
    cfg.reservoir.n1 = 300;
    cfg.reservoir.n2 = 200;
    cfg.mackey_glass.transient_steps = 10_000;
    cfg.ws_p_grid = vec![0.5, 1.0];
    cfg.ensemble_size = 3;
    cfg.ipc_ensemble_size = 2;
    cfg.ipc = IpcSchedule {
        pairs: vec![(1, 20), (2, 5)],
        n_inputs: 5_000,
        threshold: 1e-4,
        washout: 50,
    };
    cfg.base_seed = 17;
    cfg
}

#[test]
fn tables_do_not_depend_on_thread_count() {
    let mut cfg = tiny_config();
    cfg.threads = 1;
    let mut a = run_benchmark(&cfg, BenchMode::Both).unwrap();
    a.extend(run_ipc_suite(&cfg).unwrap()).unwrap();
    cfg.threads = 4;
    let mut b = run_benchmark(&cfg, BenchMode::Both).unwrap();
    b.extend(run_ipc_suite(&cfg).unwrap()).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert_eq!(a.rows.len(), (3 + 2 * 2) * 3 + 5 * 2);
    assert_eq!(aggregate(&a.rows).unwrap(), a.aggregates);
}

#[test]
fn single_member_aggregates_equal_the_row() {
    let mut cfg = tiny_config();
    cfg.ensemble_size = 1;
    cfg.kinds = vec![TopologyKind::RandomAsym];
    let t = run_benchmark(&cfg, BenchMode::Open).unwrap();
    assert_eq!(t.rows.len(), 1);
    let agg = t.aggregate(Suite::Bench, TopologyKind::RandomAsym, None, "mse_open").unwrap();
    assert_eq!(agg.median, t.rows[0].mse_open.unwrap());
    assert_eq!((agg.mad, agg.n), (0.0, 1));
    assert!(t.rows[0].mse_closed.is_none());
}

#[test]
fn shared_series_flag_reuses_one_record() {
    let mut cfg = tiny_config();
    cfg.shared_series = true;
    let a = resbench::experiment::member_series(&cfg, TopologyKind::RandomAsym, None, 0).unwrap();
    let b = resbench::experiment::member_series(&cfg, TopologyKind::WattsStrogatzSymWeights, Some(0.5), 2).unwrap();
    assert_eq!(a, b);
    cfg.shared_series = false;
    let c = resbench::experiment::member_series(&cfg, TopologyKind::WattsStrogatzSymWeights, Some(0.5), 2).unwrap();
    assert_ne!(a, c);
}

fn sample_table() -> ResultsTable {
    let mut rows = Vec::new();
    for (i, kind) in [TopologyKind::RandomAsym, TopologyKind::WattsStrogatzAsymWeights].into_iter().enumerate() {
        let p = kind.is_watts_strogatz().then_some(0.3);
        rows.push(ResultRow {
            suite: Suite::Bench,
            kind,
            p,
            member: i,
            seed: derive_seed(1, kind, p, i as u64, SeedRole::Connectivity),
            status: "ok".into(),
            mse_open: Some(1.0 / 3.0),
            mse_closed: Some(f64::INFINITY),
            t_vp: Some(0.0),
            t_vp_set_max: Some(0.0),
            train_mse: Some(1e-11),
            ipc_total: None,
            ipc_per_degree: BTreeMap::new(),
            wall_time: 0.25,
        });
    }
    rows.push(ResultRow {
        suite: Suite::Ipc,
        kind: TopologyKind::RandomSymSymWeights,
        p: None,
        member: 0,
        seed: 9,
        status: "diverged, at step 3".into(),
        mse_open: None,
        mse_closed: None,
        t_vp: None,
        t_vp_set_max: None,
        train_mse: None,
        ipc_total: Some(100.125),
        ipc_per_degree: [(1, 60.0), (2, 40.0), (3, 0.125)].into_iter().collect(),
        wall_time: 3.0,
    });
    ResultsTable::from_rows(rows).unwrap()
}

#[test]
fn csv_and_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let table = sample_table();
    let csv = dir.path().join("out.csv");
    emit_results(&table, &csv, OutputFormat::Csv, None).unwrap();
    assert_eq!(read_results_csv(&csv).unwrap(), table);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.contains(",inf,"));
    assert!(!text.to_lowercase().contains("nan"));

    let json = dir.path().join("out.json");
    let cfg = ExperimentConfig::desk();
    emit_results(&table, &json, OutputFormat::Json, Some(&cfg)).unwrap();
    let (back, back_cfg) = read_results_json(&json).unwrap();
    assert_eq!(back, table);
    assert_eq!(back_cfg.unwrap(), cfg);
    assert!(std::fs::read_to_string(&json).unwrap().contains("\"inf\""));
}

#[test]
fn empty_table_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    emit_results(&ResultsTable::default(), &path, OutputFormat::Csv, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("suite,kind,p,member,seed,status,mse_open"));
    assert_eq!(read_results_csv(&path).unwrap(), ResultsTable::default());
}

#[test]
fn aggregates_are_recomputable() {
    let t = sample_table();
    let want = AggregateRow {
        suite: Suite::Ipc,
        kind: TopologyKind::RandomSymSymWeights,
        p: None,
        metric: "ipc_d3".into(),
        median: 0.125,
        mad: 0.0,
        n: 1,
    };
    assert!(t.aggregates.contains(&want));
    assert_eq!(aggregate(&t.rows).unwrap(), t.aggregates);
}

#[test]
fn unwritable_path_reports_the_path() {
    let err = emit_results(
        &sample_table(),
        std::path::Path::new("/nonexistent-dir/x.csv"),
        OutputFormat::Csv,
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
}
