//! Leaky echo-state dynamics, ridge readout and open/closed-loop prediction.
//!
//! The state update is
//!
//! ```text
//! r[m+1] = (1 - eps) r[m] + eps tanh(W r[m] + W_in u[m+1])
//! ```
//!
//! Index bookkeeping: with a drive `d[0], d[1], ...` the state `s_i` is the
//! state after consuming `d[i]`, and the readout applied to `s_i` predicts
//! `d[i + 1]`. The first `n0` inputs are washout, the next `n1` states are
//! training rows, and prediction targets start at `d[n0 + n1 + 1]`.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dense_mul_vec;
use crate::mackey_glass::TimeSeries;
use crate::topology::ReservoirTopology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReservoirConfig {
    pub n_r: usize,
    /// Leaking rate.
    pub epsilon: f64,
    pub rho_opt: f64,
    /// Tikhonov regularization of the readout.
    pub gamma: f64,
    /// Fraction of nonzero entries in the connection matrix.
    pub density: f64,
    /// Washout steps.
    pub n0: usize,
    /// Training steps.
    pub n1: usize,
    /// Prediction steps.
    pub n2: usize,
    /// Half-width of the uniform input weights.
    pub input_scale: f64,
    /// Use the CSR form of `W` in the recurrence instead of the dense matrix.
    pub sparse_products: bool,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            n_r: 1024,
            epsilon: 0.7,
            rho_opt: 1.25,
            gamma: 1e-9,
            density: 0.008,
            n0: 500,
            n1: 2000,
            n2: 2000,
            input_scale: 0.5,
            sparse_products: true,
        }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::param(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::param(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.n0 == 0 || self.n1 == 0 || self.n2 == 0 {
            return Err(Error::param("n0, n1 and n2 must all be at least 1"));
        }
        if self.n_r < 2 {
            return Err(Error::param("n_r must be at least 2"));
        }
        if !(self.rho_opt > 0.0) || !(self.input_scale > 0.0) {
            return Err(Error::param("rho_opt and input_scale must be positive"));
        }
        Ok(())
    }

    /// Drive length needed for washout, training and an `n2`-step open-loop
    /// prediction window.
    pub fn required_drive_len(&self) -> usize {
        self.n0 + self.n1 + self.n2 + 1
    }
}

/// Fixed random input weights, `n_r x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMatrix {
    n_r: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl InputMatrix {
    pub fn from_entries(n_r: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n_r * dim {
            return Err(Error::contract(format!(
                "input matrix {n_r}x{dim} needs {} entries, got {}",
                n_r * dim,
                entries.len()
            )));
        }
        Ok(Self { n_r, dim, entries })
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn init_input_matrix(
    n_r: usize,
    dim: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<InputMatrix> {
    if n_r == 0 || dim == 0 {
        return Err(Error::param("input matrix dimensions must be positive"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param(format!("input scale must be positive, got {scale}")));
    }
    let entries = (0..n_r * dim)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Ok(InputMatrix { n_r, dim, entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState(pub Vec<f64>);

impl ReservoirState {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct TrainedReadout {
    /// `output_dim x n_r`
    pub w_out: Mat<f64>,
    pub gamma_used: f64,
    pub train_mse: f64,
}

impl TrainedReadout {
    pub fn output_dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn apply(&self, r: &[f64], out: &mut [f64]) {
        dense_mul_vec(&self.w_out, r, out);
    }
}

/// Reservoir matrix in whichever form the recurrence should use.
#[derive(Clone, Copy)]
pub enum Recurrence<'a> {
    Dense(&'a Mat<f64>),
    Sparse(&'a crate::linalg::CsrMatrix),
}

impl<'a> Recurrence<'a> {
    pub fn of(topology: &'a ReservoirTopology, sparse: bool) -> Self {
        if sparse {
            Recurrence::Sparse(&topology.sparse)
        } else {
            Recurrence::Dense(&topology.w)
        }
    }

    fn size(&self) -> usize {
        match self {
            Recurrence::Dense(m) => m.nrows(),
            Recurrence::Sparse(m) => m.nrows(),
        }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Recurrence::Dense(m) => dense_mul_vec(m, x, out),
            Recurrence::Sparse(m) => m.mul_vec(x, out),
        }
    }
}

/// A reservoir ready to be driven: recurrence, input weights and leak.
pub struct Driver<'a> {
    w: Recurrence<'a>,
    w_in: &'a InputMatrix,
    epsilon: f64,
    scratch: Vec<f64>,
}

impl<'a> Driver<'a> {
    pub fn new(w: Recurrence<'a>, w_in: &'a InputMatrix, epsilon: f64) -> Result<Self> {
        let n = w.size();
        if w_in.n_r() != n {
            return Err(Error::contract(format!(
                "reservoir has {n} nodes but input matrix has {} rows",
                w_in.n_r()
            )));
        }
        Ok(Self {
            w,
            w_in,
            epsilon,
            scratch: vec![0.0; n],
        })
    }

    pub fn size(&self) -> usize {
        self.scratch.len()
    }

    /// Advances `r` in place by one input `u`.
    pub fn advance(&mut self, r: &mut [f64], u: &[f64]) {
        debug_assert_eq!(u.len(), self.w_in.dim());
        self.w.mul(r, &mut self.scratch);
        let eps = self.epsilon;
        for (i, (ri, pre)) in r.iter_mut().zip(&self.scratch).enumerate() {
            let drive: f64 = self.w_in.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
            *ri = (1.0 - eps) * *ri + eps * (pre + drive).tanh();
        }
    }
}

/// One state update with a dense reservoir matrix.
pub fn step(
    r: &ReservoirState,
    u: &[f64],
    w: &Mat<f64>,
    w_in: &InputMatrix,
    epsilon: f64,
) -> Result<ReservoirState> {
    let n = r.0.len();
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::contract(format!(
            "state has {n} entries but W is {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    if u.len() != w_in.dim() {
        return Err(Error::contract(format!(
            "input has {} entries but W_in expects {}",
            u.len(),
            w_in.dim()
        )));
    }
    let mut driver = Driver::new(Recurrence::Dense(w), w_in, epsilon)?;
    let mut next = r.0.clone();
    driver.advance(&mut next, u);
    Ok(ReservoirState(next))
}

/// Training rows produced by [`collect_states`].
#[derive(Debug, Clone)]
pub struct CollectedStates {
    /// `n1 x n_r`; row `t` is the state after consuming `d[n0 + t]`.
    pub states: Mat<f64>,
    /// `n1 x 1`; row `t` is `d[n0 + t + 1]`.
    pub targets: Mat<f64>,
    /// Drive index of the first target.
    pub first_target: usize,
    /// State after the last training input, the warm start for prediction.
    pub final_state: ReservoirState,
}

/// Runs washout from `r = 0` and records `n1` one-step-ahead training rows.
pub fn collect_states(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    drive: &TimeSeries,
    cfg: &ReservoirConfig,
) -> Result<CollectedStates> {
    if cfg.n1 == 0 {
        return Err(Error::param("n1 must be at least 1"));
    }
    let need = cfg.n0 + cfg.n1 + 1;
    if drive.len() < need {
        return Err(Error::contract(format!(
            "drive has {} samples, need at least {need}",
            drive.len()
        )));
    }
    let n = topology.size();
    let mut driver = Driver::new(Recurrence::of(topology, cfg.sparse_products), w_in, cfg.epsilon)?;
    let d = &drive.values;
    let mut r = vec![0.0; n];
    for u in &d[..cfg.n0] {
        driver.advance(&mut r, std::slice::from_ref(u));
    }
    let mut states = Mat::zeros(cfg.n1, n);
    let mut targets = Mat::zeros(cfg.n1, 1);
    for t in 0..cfg.n1 {
        let i = cfg.n0 + t;
        driver.advance(&mut r, &d[i..=i]);
        for (j, &v) in r.iter().enumerate() {
            states[(t, j)] = v;
        }
        targets[(t, 0)] = d[i + 1];
    }
    Ok(CollectedStates {
        states,
        targets,
        first_target: cfg.n0 + 1,
        final_state: ReservoirState(r),
    })
}

/// Ridge regression `w_out = U^T R (R^T R + gamma I)^-1`, rows of `R` are time.
pub fn train_readout(states: &Mat<f64>, targets: &Mat<f64>, gamma: f64) -> Result<TrainedReadout> {
    if states.nrows() != targets.nrows() {
        return Err(Error::contract(format!(
            "{} state rows but {} target rows",
            states.nrows(),
            targets.nrows()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::param(format!("gamma must be nonnegative, got {gamma}")));
    }
    if states.nrows() == 0 {
        return Err(Error::contract("no training rows"));
    }
    let mut gram = states.transpose() * states;
    for i in 0..gram.nrows() {
        gram[(i, i)] += gamma;
    }
    let rhs = states.transpose() * targets;
    let llt = gram.llt(Side::Lower).map_err(|e| {
        Error::Solver(format!(
            "normal matrix is not positive definite ({e:?}); use gamma > 0"
        ))
    })?;
    let sol = llt.solve(&rhs);
    if sol.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Solver(
            "readout weights are not finite; use gamma > 0".into(),
        ));
    }
    let w_out = sol.transpose().to_owned();
    let fitted = states * sol;
    let m = (targets.nrows() * targets.ncols()) as f64;
    let train_mse = (0..targets.ncols())
        .flat_map(|c| (0..targets.nrows()).map(move |r| (r, c)))
        .map(|(r, c)| (targets[(r, c)] - fitted[(r, c)]).powi(2))
        .sum::<f64>()
        / m;
    Ok(TrainedReadout {
        w_out,
        gamma_used: gamma,
        train_mse,
    })
}

/// Continues from `state` feeding `inputs` one at a time and returns the
/// readout after each input.
pub fn open_loop_from(
    readout: &TrainedReadout,
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    state: &ReservoirState,
    inputs: &[f64],
    cfg: &ReservoirConfig,
) -> Result<Vec<f64>> {
    check_scalar_readout(readout, w_in)?;
    let mut driver = Driver::new(Recurrence::of(topology, cfg.sparse_products), w_in, cfg.epsilon)?;
    let mut r = state.0.clone();
    let mut y = [0.0];
    Ok(inputs
        .iter()
        .map(|u| {
            driver.advance(&mut r, std::slice::from_ref(u));
            readout.apply(&r, &mut y);
            y[0]
        })
        .collect())
}

/// One-step-ahead predictions with the true input fed at every step.
/// Element `t` of the result predicts `drive[n0 + n1 + 1 + t]`.
pub fn predict_open_loop(
    readout: &TrainedReadout,
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    drive: &TimeSeries,
    cfg: &ReservoirConfig,
) -> Result<TimeSeries> {
    if drive.len() < cfg.required_drive_len() {
        return Err(Error::contract(format!(
            "drive has {} samples, need at least {}",
            drive.len(),
            cfg.required_drive_len()
        )));
    }
    let collected = collect_states(topology, w_in, drive, cfg)?;
    let start = cfg.n0 + cfg.n1;
    let preds = open_loop_from(
        readout,
        topology,
        w_in,
        &collected.final_state,
        &drive.values[start..start + cfg.n2],
        cfg,
    )?;
    Ok(TimeSeries {
        values: preds,
        step: drive.step,
        origin: drive.origin + (start + 1) as f64 * drive.step,
    })
}

/// Autonomous rollout from `warm_state`. `first_input` is the last observed
/// sample (`d[n0 + n1]` after training); from then on the readout's
/// prediction is fed back as the next input. Element `t` of the result is
/// aligned with open-loop prediction `t`, and element 0 equals it exactly.
pub fn predict_closed_loop(
    readout: &TrainedReadout,
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    warm_state: &ReservoirState,
    first_input: f64,
    n2: usize,
    cfg: &ReservoirConfig,
) -> Result<Vec<f64>> {
    check_scalar_readout(readout, w_in)?;
    let mut driver = Driver::new(Recurrence::of(topology, cfg.sparse_products), w_in, cfg.epsilon)?;
    let mut r = warm_state.0.clone();
    let mut y = [first_input];
    let mut out = Vec::with_capacity(n2);
    for t in 0..n2 {
        let u = y;
        driver.advance(&mut r, &u);
        readout.apply(&r, &mut y);
        if !y[0].is_finite() {
            return Err(Error::Divergence {
                step: t,
                detail: "closed-loop prediction is not finite".into(),
            });
        }
        out.push(y[0]);
    }
    Ok(out)
}

fn check_scalar_readout(readout: &TrainedReadout, w_in: &InputMatrix) -> Result<()> {
    if readout.output_dim() != 1 || w_in.dim() != 1 {
        return Err(Error::contract(
            "prediction is implemented for scalar input and output",
        ));
    }
    if readout.w_out.ncols() != w_in.n_r() {
        return Err(Error::contract("readout width does not match reservoir size"));
    }
    Ok(())
}

/// Largest component gap between two trajectories that share the same
/// drive but start from different states, after `inputs` have been consumed.
pub fn echo_state_gap(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    inputs: &[f64],
    epsilon: f64,
    start_a: &ReservoirState,
    start_b: &ReservoirState,
) -> Result<f64> {
    let mut driver = Driver::new(Recurrence::Sparse(&topology.sparse), w_in, epsilon)?;
    let mut a = start_a.0.clone();
    let mut b = start_b.0.clone();
    if a.len() != driver.size() || b.len() != driver.size() {
        return Err(Error::contract("initial states do not match reservoir size"));
    }
    for u in inputs {
        driver.advance(&mut a, std::slice::from_ref(u));
        driver.advance(&mut b, std::slice::from_ref(u));
    }
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_input(n: usize) -> InputMatrix {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        InputMatrix::from_entries(n, 1, e).unwrap()
    }

    #[test]
    fn input_matrix_range_and_determinism() {
        let a = init_input_matrix(4, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((a.n_r(), a.dim()), (4, 1));
        assert!(a.entries().iter().all(|v| v.abs() <= 0.5));
        let b = init_input_matrix(4, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(init_input_matrix(4, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn step_leaks_toward_zero() {
        let n = 3;
        let w = Mat::zeros(n, n);
        let w_in = InputMatrix::from_entries(n, 1, vec![0.0; n]).unwrap();
        let r = ReservoirState(vec![1.0; n]);
        let next = step(&r, &[0.7], &w, &w_in, 0.7).unwrap();
        for v in next.0 {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn step_full_leak_is_tanh() {
        let w = Mat::zeros(2, 2);
        let next = step(&ReservoirState::zeros(2), &[0.5], &w, &identity_input(2), 1.0).unwrap();
        assert!((next.0[0] - 0.462_117_157_260_009_8).abs() < 1e-12);
        assert_eq!(next.0[1], 0.0);
    }

    #[test]
    fn step_without_leak_keeps_state() {
        let w = Mat::from_fn(2, 2, |i, j| (i + j) as f64);
        let r = ReservoirState(vec![0.25, -0.5]);
        let next = step(&r, &[3.0], &w, &identity_input(2), 0.0).unwrap();
        assert_eq!(next, r);
    }

    #[test]
    fn step_rejects_mismatched_dimensions() {
        let w = Mat::zeros(3, 3);
        assert!(step(&ReservoirState::zeros(2), &[0.0], &w, &identity_input(2), 0.5).is_err());
        assert!(step(&ReservoirState::zeros(3), &[0.0, 1.0], &w, &identity_input(3), 0.5).is_err());
    }

    #[test]
    fn exact_representable_target_gives_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = Mat::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let targets = Mat::from_fn(40, 1, |i, _| states[(i, 2)]);
        let ro = train_readout(&states, &targets, 0.0).unwrap();
        assert!(ro.train_mse < 1e-24);
        for j in 0..6 {
            let expect = if j == 2 { 1.0 } else { 0.0 };
            assert!((ro.w_out[(0, j)] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_gamma_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states = Mat::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let targets = Mat::from_fn(30, 1, |_, _| rng.random_range(-1.0..1.0));
        let ro = train_readout(&states, &targets, 1e12).unwrap();
        assert!(ro.w_out.col_iter().all(|c| c.iter().all(|v| v.abs() < 1e-10)));
    }

    #[test]
    fn singular_normal_matrix_without_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = Mat::from_fn(10, 3, |_, j| if j == 1 { 0.0 } else { rng.random_range(-1.0..1.0) });
        let targets = Mat::from_fn(10, 1, |i, _| i as f64);
        assert!(matches!(
            train_readout(&states, &targets, 0.0),
            Err(Error::Solver(_))
        ));
        assert!(train_readout(&states, &targets, 1e-9).is_ok());
    }

    #[test]
    fn row_count_mismatch() {
        let states = Mat::<f64>::zeros(5, 2);
        let targets = Mat::<f64>::zeros(4, 1);
        assert!(matches!(
            train_readout(&states, &targets, 1.0),
            Err(Error::Contract(_))
        ));
    }
}
