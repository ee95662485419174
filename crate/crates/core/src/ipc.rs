//! Information processing capacity.
//!
//! A reservoir is driven with i.i.d. uniform inputs `xi` in `[-1, 1]` and a
//! linear estimator on its states is asked to reconstruct every basis
//! function
//!
//! ```text
//! phi_n(k) = prod_j P_{d_j}(xi[k - j])
//! ```
//!
//! built from products of Legendre polynomials of delayed inputs. The
//! capacity for one target is `1 - |phi - R w|^2 / |phi|^2`; summing over
//! all bases of total degree `d` gives `IPC_d`, and the total over degrees
//! is bounded by the number of reservoir nodes.
//!
//! States are recorded once and `R^T R + gamma I` is factorized once; every
//! basis then costs one product `R^T phi` and one triangular solve. With
//! `b = R^T phi` and `w = (R^T R + gamma I)^-1 b` the residual simplifies to
//! `|phi|^2 - w.b - gamma |w|^2`, so the capacity is `(w.b + gamma |w|^2) / |phi|^2`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reservoir::{Driver, InputMatrix, Recurrence, ReservoirConfig};
use crate::topology::ReservoirTopology;

/// Highest polynomial degree supported by the schedule.
pub const MAX_DEGREE: u32 = 5;

/// Capacities of a surrogate with negative value above this are clamped.
const CLAMP_SLACK: f64 = 1e-12;

/// Legendre polynomial `P_alpha(xi)` by Bonnet's recursion.
pub fn legendre_eval(alpha: u32, xi: f64) -> f64 {
    match alpha {
        0 => 1.0,
        1 => xi,
        _ => {
            let (mut prev, mut cur) = (1.0, xi);
            for a in 1..alpha {
                let a = a as f64;
                let next = ((2.0 * a + 1.0) * xi * cur - a * prev) / (a + 1.0);
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Fills `out[a] = P_a(xi)` for `a` in `0..out.len()`.
pub fn legendre_all(xi: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = xi;
    }
    for a in 1..out.len().saturating_sub(1) {
        let af = a as f64;
        out[a + 1] = ((2.0 * af + 1.0) * xi * out[a] - af * out[a - 1]) / (af + 1.0);
    }
}

/// Assignment of Legendre degrees to input delays. Only nonzero degrees are
/// stored, sorted by delay.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex {
    terms: Vec<(usize, u32)>,
}

impl MultiIndex {
    pub fn empty() -> Self {
        Self { terms: Vec::new() }
    }

    /// Builds from `(delay, degree)` pairs; delays must be distinct and
    /// degrees positive.
    pub fn new(mut terms: Vec<(usize, u32)>) -> Result<Self> {
        terms.sort_unstable();
        if terms.iter().any(|&(_, d)| d == 0) {
            return Err(Error::param("multi-index degrees must be positive"));
        }
        if terms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::param("multi-index delays must be distinct"));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[(usize, u32)] {
        &self.terms
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.iter().map(|&(_, d)| d).sum()
    }

    pub fn max_delay(&self) -> usize {
        self.terms.last().map_or(0, |&(j, _)| j)
    }

    pub fn delays_field(&self) -> String {
        join(self.terms.iter().map(|&(j, _)| j))
    }

    pub fn degrees_field(&self) -> String {
        join(self.terms.iter().map(|&(_, d)| d))
    }
}

fn join<T: fmt::Display>(it: impl Iterator<Item = T>) -> String {
    it.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("1");
        }
        for &(j, d) in &self.terms {
            write!(f, "P{d}(xi[k-{j}])")?;
        }
        Ok(())
    }
}

/// Integer partitions of `d` as non-increasing part lists, largest first.
pub fn integer_partitions(d: u32) -> Vec<Vec<u32>> {
    fn rec(rest: u32, max_part: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if rest == 0 {
            out.push(cur.clone());
            return;
        }
        for p in (1..=rest.min(max_part)).rev() {
            cur.push(p);
            rec(rest - p, p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        rec(d, d, &mut Vec::new(), &mut out);
    }
    out
}

/// Number of distinct orderings of a multiset of parts.
pub fn multiset_permutations_count(parts: &[u32]) -> u128 {
    let mut counts: BTreeMap<u32, u128> = BTreeMap::new();
    for &p in parts {
        *counts.entry(p).or_default() += 1;
    }
    let mut total = factorial(parts.len() as u128);
    for c in counts.values() {
        total /= factorial(*c);
    }
    total
}

fn factorial(n: u128) -> u128 {
    (1..=n).product()
}

pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Per-partition breakdown of [`count_basis`]: `(parts, orderings, count)`.
pub fn count_by_partition(d: u32, max_delay: usize) -> Vec<(Vec<u32>, u128, u128)> {
    let slots = max_delay as u128 + 1;
    integer_partitions(d)
        .into_iter()
        .map(|parts| {
            let orderings = multiset_permutations_count(&parts);
            let count = orderings * binomial(slots, parts.len() as u128);
            (parts, orderings, count)
        })
        .collect()
}

/// Closed-form number of basis functions of total degree `d` over delays
/// `0..=max_delay`.
pub fn count_basis(d: u32, max_delay: usize) -> u128 {
    count_by_partition(d, max_delay)
        .into_iter()
        .map(|(_, _, c)| c)
        .sum()
}

/// Next lexicographic permutation in place; false when `v` was the last one.
fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Every multi-index of total degree `d` whose delays lie in `0..=max_delay`.
///
/// For each partition of `d`, the parts are placed on every set of distinct
/// delays and then permuted over those delays in all distinguishable ways.
pub fn enumerate_multi_indices(d: u32, max_delay: usize) -> Vec<MultiIndex> {
    let slots = max_delay + 1;
    let mut out = Vec::new();
    for parts in integer_partitions(d) {
        let q = parts.len();
        if q > slots {
            continue;
        }
        let mut positions: Vec<usize> = (0..q).collect();
        loop {
            let mut arrangement = parts.clone();
            arrangement.sort_unstable();
            loop {
                out.push(MultiIndex {
                    terms: positions.iter().copied().zip(arrangement.iter().copied()).collect(),
                });
                if !next_permutation(&mut arrangement) {
                    break;
                }
            }
            // next q-combination of 0..slots
            let mut i = q;
            while i > 0 && positions[i - 1] == slots - q + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            positions[i - 1] += 1;
            for t in i..q {
                positions[t] = positions[t - 1] + 1;
            }
        }
    }
    out
}

/// Evaluates basis `n` on `xi` for time indices `first..xi.len()` where
/// `first = max(washout, n.max_delay())`.
pub fn basis_target(n: &MultiIndex, xi: &[f64], washout: usize) -> Result<Vec<f64>> {
    let first = washout.max(n.max_delay());
    if xi.len() <= first {
        return Err(Error::contract(format!(
            "input has {} samples, basis needs more than {first}",
            xi.len()
        )));
    }
    Ok((first..xi.len())
        .map(|k| {
            n.terms
                .iter()
                .map(|&(j, d)| legendre_eval(d, xi[k - j]))
                .product()
        })
        .collect())
}

/// Capacity of a single target with a freshly fitted ridge estimator.
pub fn capacity(states: MatRef<'_, f64>, target: &[f64], gamma: f64) -> Result<f64> {
    if states.nrows() != target.len() {
        return Err(Error::contract(format!(
            "{} state rows but {} target samples",
            states.nrows(),
            target.len()
        )));
    }
    let power: f64 = target.iter().map(|v| v * v).sum();
    if !(power > 0.0) {
        return Err(Error::DegenerateRange("target has zero power".into()));
    }
    let est = CapacityEstimator::new(states, gamma)?;
    let phi = Mat::from_fn(target.len(), 1, |i, _| target[i]);
    let b = states.transpose() * &phi;
    Ok(est.capacities(b.as_ref(), &[power])[0])
}

/// Factorized normal equations shared across all targets.
struct CapacityEstimator {
    llt: faer::linalg::solvers::Llt<f64>,
    gamma: f64,
}

impl CapacityEstimator {
    fn new(states: MatRef<'_, f64>, gamma: f64) -> Result<Self> {
        let gram = states.transpose() * states;
        Self::from_gram(gram, gamma)
    }

    fn from_gram(mut gram: Mat<f64>, gamma: f64) -> Result<Self> {
        for i in 0..gram.nrows() {
            gram[(i, i)] += gamma;
        }
        let llt = gram.llt(Side::Lower).map_err(|e| {
            Error::Solver(format!(
                "state Gram matrix is not positive definite ({e:?}); use gamma > 0"
            ))
        })?;
        Ok(Self { llt, gamma })
    }

    /// Capacities for the columns of `b = R^T Phi` with column powers `power`.
    fn capacities(&self, b: MatRef<'_, f64>, power: &[f64]) -> Vec<f64> {
        let w = self.llt.solve(b);
        (0..b.ncols())
            .map(|c| {
                let (wc, bc) = (w.col(c), b.col(c));
                let fit: f64 = (0..bc.nrows())
                    .map(|i| wc[i] * bc[i] + self.gamma * wc[i] * wc[i])
                    .sum();
                let cap = fit / power[c];
                if (-CLAMP_SLACK..0.0).contains(&cap) {
                    0.0
                } else {
                    cap.clamp(0.0, 1.0)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpcSchedule {
    /// `(degree, max delay)` pairs, degrees strictly increasing.
    pub pairs: Vec<(u32, usize)>,
    /// Length of the random input sequence.
    pub n_inputs: usize,
    /// Capacities below this are set to zero.
    pub threshold: f64,
    pub washout: usize,
}

impl Default for IpcSchedule {
    fn default() -> Self {
        Self::full()
    }
}

impl IpcSchedule {
    /// Full schedule up to degree 5 with 900k inputs.
    pub fn full() -> Self {
        Self {
            pairs: vec![(1, 2000), (2, 300), (3, 50), (4, 30), (5, 15)],
            n_inputs: 900_000,
            threshold: 1e-4,
            washout: 500,
        }
    }

    /// Reduced schedule for quick runs: degree 3 and 100k inputs.
    pub fn desk() -> Self {
        Self {
            pairs: vec![(1, 500), (2, 100), (3, 30)],
            n_inputs: 100_000,
            threshold: 1e-4,
            washout: 500,
        }
    }

    pub fn max_delay(&self) -> usize {
        self.pairs.iter().map(|&(_, j)| j).max().unwrap_or(0)
    }

    /// First input index whose state is used: every basis needs its full
    /// delay history and the washout must have passed.
    pub fn first_row(&self) -> usize {
        self.washout.max(self.max_delay())
    }

    pub fn rows(&self) -> usize {
        self.n_inputs.saturating_sub(self.first_row())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::param("IPC schedule has no (degree, delay) pairs"));
        }
        if self.pairs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::param("IPC schedule degrees must be strictly increasing"));
        }
        if self.pairs.iter().any(|&(d, j)| d == 0 || d > MAX_DEGREE || j == 0) {
            return Err(Error::param(format!(
                "IPC schedule needs 1 <= d <= {MAX_DEGREE} and J > 0"
            )));
        }
        if self.n_inputs <= self.max_delay() + self.washout {
            return Err(Error::param(format!(
                "n_inputs {} must exceed max delay {} plus washout {}",
                self.n_inputs,
                self.max_delay(),
                self.washout
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::param("IPC threshold must be nonnegative"));
        }
        Ok(())
    }

    pub fn n_bases(&self) -> u128 {
        self.pairs.iter().map(|&(d, j)| count_basis(d, j)).sum()
    }
}

/// How the zeroing threshold is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Use `IpcSchedule::threshold`.
    #[default]
    Fixed,
    /// `safety` times the largest capacity of `count` surrogate targets,
    /// each a basis function cyclically shifted in time so that it is no
    /// longer aligned with the states.
    Surrogate { count: usize, safety: f64 },
}

/// Where reservoir states live while capacities are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StateStorage {
    /// Keep the whole `rows x n_r` state matrix.
    InMemory,
    /// Re-drive the reservoir per degree and accumulate `R^T Phi` over
    /// blocks of `block` time steps.
    Streaming { block: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpcOptions {
    pub threshold_mode: ThresholdMode,
    pub storage: StateStorage,
    /// Upper bound for the in-memory state matrix.
    pub memory_limit_bytes: usize,
    /// Basis functions evaluated per batch in memory mode.
    pub basis_chunk: usize,
    /// Contributors per degree kept for the capacity dump.
    pub keep_top: usize,
}

impl Default for IpcOptions {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Fixed,
            storage: StateStorage::InMemory,
            memory_limit_bytes: 2 << 30,
            basis_chunk: 256,
            keep_top: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub index: MultiIndex,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityProfile {
    pub per_degree: BTreeMap<u32, f64>,
    pub total: f64,
    pub n_bases_evaluated: BTreeMap<u32, usize>,
    pub threshold_used: f64,
    pub rows: usize,
    /// Largest capacities per degree, descending.
    pub top: BTreeMap<u32, Vec<Contributor>>,
}

impl CapacityProfile {
    /// Writes `degree,delays,degrees,capacity` for the kept contributors.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(out, "degree,delays,degrees,capacity")?;
            for (d, list) in &self.top {
                for c in list {
                    writeln!(
                        out,
                        "{d},{},{},{:.17e}",
                        c.index.delays_field(),
                        c.index.degrees_field(),
                        c.capacity
                    )?;
                }
            }
            out.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }
}

/// Legendre values `P_a(xi[k])`, stored degree-major.
struct LegendreTable {
    len: usize,
    values: Vec<f64>,
}

impl LegendreTable {
    fn new(xi: &[f64], max_degree: u32) -> Self {
        let deg = max_degree as usize + 1;
        let len = xi.len();
        let mut values = vec![0.0; deg * len];
        let mut buf = vec![0.0; deg];
        for (k, &x) in xi.iter().enumerate() {
            legendre_all(x, &mut buf);
            for (a, &p) in buf.iter().enumerate() {
                values[a * len + k] = p;
            }
        }
        Self { len, values }
    }

    #[inline]
    fn row(&self, degree: u32) -> &[f64] {
        let a = degree as usize;
        &self.values[a * self.len..(a + 1) * self.len]
    }

    /// Column-major `Phi` for time indices `k0..k1` (shifted cyclically by
    /// `shift` within `wrap` rows starting at `base`, when given).
    fn fill(&self, bases: &[MultiIndex], k0: usize, k1: usize, phi: &mut Mat<f64>) {
        let t = k1 - k0;
        debug_assert_eq!(phi.nrows(), t);
        for (c, n) in bases.iter().enumerate() {
            let col = phi.col_mut(c);
            let col = col.try_as_col_major_mut().expect("owned matrix column is contiguous");
            let col = col.as_slice_mut();
            col.iter_mut().for_each(|v| *v = 1.0);
            for &(j, d) in &n.terms {
                let p = &self.row(d)[k0 - j..k1 - j];
                for (v, &pv) in col.iter_mut().zip(p) {
                    *v *= pv;
                }
            }
        }
    }
}

/// Drives the reservoir with `xi` and returns states for inputs
/// `first..xi.len()` as a row-major-in-time matrix.
fn record_states(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    xi: &[f64],
    first: usize,
    cfg: &ReservoirConfig,
) -> Result<Mat<f64>> {
    let n = topology.size();
    let mut driver = Driver::new(Recurrence::of(topology, cfg.sparse_products), w_in, cfg.epsilon)?;
    let mut r = vec![0.0; n];
    let mut states = Mat::zeros(xi.len() - first, n);
    for (k, u) in xi.iter().enumerate() {
        driver.advance(&mut r, std::slice::from_ref(u));
        if k >= first {
            for (j, &v) in r.iter().enumerate() {
                states[(k - first, j)] = v;
            }
        }
    }
    Ok(states)
}

/// Streams states block by block through `sink(k0, block)`, where `block`
/// holds states for inputs `k0..k0 + block.nrows()`.
fn stream_states(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    xi: &[f64],
    first: usize,
    block: usize,
    cfg: &ReservoirConfig,
    mut sink: impl FnMut(usize, &Mat<f64>),
) -> Result<()> {
    let n = topology.size();
    let mut driver = Driver::new(Recurrence::of(topology, cfg.sparse_products), w_in, cfg.epsilon)?;
    let mut r = vec![0.0; n];
    for u in &xi[..first] {
        driver.advance(&mut r, std::slice::from_ref(u));
    }
    let mut k0 = first;
    while k0 < xi.len() {
        let k1 = (k0 + block).min(xi.len());
        let mut states = Mat::zeros(k1 - k0, n);
        for k in k0..k1 {
            driver.advance(&mut r, &xi[k..=k]);
            for (j, &v) in r.iter().enumerate() {
                states[(k - k0, j)] = v;
            }
        }
        sink(k0, &states);
        k0 = k1;
    }
    Ok(())
}

/// Raw (unthresholded) capacities for one degree's bases.
fn degree_capacities(
    est: &CapacityEstimator,
    source: &StateSource<'_>,
    table: &LegendreTable,
    bases: &[MultiIndex],
    first: usize,
    opts: &IpcOptions,
) -> Result<Vec<f64>> {
    let total_rows = table.len;
    match source {
        StateSource::Memory(states) => {
            let chunks: Vec<&[MultiIndex]> = bases.chunks(opts.basis_chunk.max(1)).collect();
            let per_chunk: Vec<Vec<f64>> = chunks
                .par_iter()
                .map(|chunk| {
                    let mut phi = Mat::zeros(total_rows - first, chunk.len());
                    table.fill(chunk, first, total_rows, &mut phi);
                    let power = column_power(&phi);
                    let b = states.transpose() * &phi;
                    est.capacities(b.as_ref(), &power)
                })
                .collect();
            Ok(per_chunk.into_iter().flatten().collect())
        }
        StateSource::Stream {
            topology,
            w_in,
            xi,
            block,
            cfg,
        } => {
            let n = topology.size();
            let mut b = Mat::zeros(n, bases.len());
            let mut power = vec![0.0; bases.len()];
            stream_states(topology, w_in, xi, first, *block, cfg, |k0, states| {
                let k1 = k0 + states.nrows();
                let mut phi = Mat::zeros(k1 - k0, bases.len());
                table.fill(bases, k0, k1, &mut phi);
                for (p, add) in power.iter_mut().zip(column_power(&phi)) {
                    *p += add;
                }
                matmul(b.as_mut(), Accum::Add, states.transpose(), phi.as_ref(), 1.0, Par::Seq);
            })?;
            Ok(est.capacities(b.as_ref(), &power))
        }
    }
}

fn column_power(phi: &Mat<f64>) -> Vec<f64> {
    phi.col_iter()
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect()
}

enum StateSource<'a> {
    Memory(Mat<f64>),
    Stream {
        topology: &'a ReservoirTopology,
        w_in: &'a InputMatrix,
        xi: &'a [f64],
        block: usize,
        cfg: &'a ReservoirConfig,
    },
}

/// Uniform `[-1, 1]` input sequence.
pub fn random_inputs(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Full capacity profile of a reservoir for the given schedule.
pub fn compute_ipc(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    schedule: &IpcSchedule,
    cfg: &ReservoirConfig,
    opts: &IpcOptions,
    rng: &mut impl Rng,
) -> Result<CapacityProfile> {
    schedule.validate()?;
    let xi = random_inputs(schedule.n_inputs, rng);
    compute_ipc_with_inputs(topology, w_in, schedule, cfg, opts, &xi, rng)
}

/// As [`compute_ipc`] but with an explicit input sequence; `rng` is only
/// used for surrogate shifts.
pub fn compute_ipc_with_inputs(
    topology: &ReservoirTopology,
    w_in: &InputMatrix,
    schedule: &IpcSchedule,
    cfg: &ReservoirConfig,
    opts: &IpcOptions,
    xi: &[f64],
    rng: &mut impl Rng,
) -> Result<CapacityProfile> {
    schedule.validate()?;
    if xi.len() != schedule.n_inputs {
        return Err(Error::contract(format!(
            "expected {} inputs, got {}",
            schedule.n_inputs,
            xi.len()
        )));
    }
    let n = topology.size();
    let first = schedule.first_row();
    let rows = schedule.rows();
    let max_deg = schedule.pairs.iter().map(|&(d, _)| d).max().unwrap_or(1);
    let table = LegendreTable::new(xi, max_deg);

    let (est, source) = match opts.storage {
        StateStorage::InMemory => {
            let need = rows
                .saturating_mul(n + opts.basis_chunk.max(1))
                .saturating_mul(std::mem::size_of::<f64>());
            if need > opts.memory_limit_bytes {
                return Err(Error::Resource(format!(
                    "in-memory states need about {} MiB (limit {} MiB); use streaming state storage",
                    need >> 20,
                    opts.memory_limit_bytes >> 20
                )));
            }
            let states = record_states(topology, w_in, xi, first, cfg)?;
            let est = CapacityEstimator::new(states.as_ref(), cfg.gamma)?;
            (est, StateSource::Memory(states))
        }
        StateStorage::Streaming { block } => {
            let block = block.max(1);
            let mut gram = Mat::<f64>::zeros(n, n);
            stream_states(topology, w_in, xi, first, block, cfg, |_, states| {
                matmul(
                    gram.as_mut(),
                    Accum::Add,
                    states.transpose(),
                    states.as_ref(),
                    1.0,
                    Par::Seq,
                );
            })?;
            let est = CapacityEstimator::from_gram(gram, cfg.gamma)?;
            (
                est,
                StateSource::Stream {
                    topology,
                    w_in,
                    xi,
                    block,
                    cfg,
                },
            )
        }
    };

    let per_degree_bases: Vec<(u32, Vec<MultiIndex>)> = schedule
        .pairs
        .iter()
        .map(|&(d, j)| (d, enumerate_multi_indices(d, j)))
        .collect();

    let threshold = match opts.threshold_mode {
        ThresholdMode::Fixed => schedule.threshold,
        ThresholdMode::Surrogate { count, safety } => {
            let all: Vec<&MultiIndex> = per_degree_bases.iter().flat_map(|(_, b)| b).collect();
            surrogate_threshold(&est, &source, xi, first, &all, count, safety, rng)?
        }
    };

    let mut profile = CapacityProfile {
        per_degree: BTreeMap::new(),
        total: 0.0,
        n_bases_evaluated: BTreeMap::new(),
        threshold_used: threshold,
        rows,
        top: BTreeMap::new(),
    };
    for (d, bases) in &per_degree_bases {
        let raw = degree_capacities(&est, &source, &table, bases, first, opts)?;
        let kept: Vec<f64> = raw
            .iter()
            .map(|&c| if c < threshold { 0.0 } else { c })
            .collect();
        let sum: f64 = kept.iter().sum();
        let mut order: Vec<usize> = (0..kept.len()).filter(|&i| kept[i] > 0.0).collect();
        order.sort_by(|&a, &b| kept[b].total_cmp(&kept[a]).then(a.cmp(&b)));
        order.truncate(opts.keep_top);
        profile.top.insert(
            *d,
            order
                .into_iter()
                .map(|i| Contributor {
                    index: bases[i].clone(),
                    capacity: kept[i],
                })
                .collect(),
        );
        profile.per_degree.insert(*d, sum);
        profile.n_bases_evaluated.insert(*d, bases.len());
    }
    profile.total = profile.per_degree.values().sum();
    Ok(profile)
}

#[allow(clippy::too_many_arguments)]
fn surrogate_threshold(
    est: &CapacityEstimator,
    source: &StateSource<'_>,
    xi: &[f64],
    first: usize,
    pool: &[&MultiIndex],
    count: usize,
    safety: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if count == 0 || pool.is_empty() {
        return Err(Error::param("surrogate threshold needs at least one surrogate"));
    }
    let rows = xi.len() - first;
    let mut phi = Mat::zeros(rows, count);
    for c in 0..count {
        let n = pool[rng.random_range(0..pool.len())];
        let target = basis_target(n, xi, first)?;
        let shift = rng.random_range(rows / 4..=(3 * rows / 4).max(rows / 4));
        for (i, v) in target.iter().enumerate() {
            phi[((i + shift) % rows, c)] = *v;
        }
    }
    let power = column_power(&phi);
    let b = match source {
        StateSource::Memory(states) => states.transpose() * &phi,
        StateSource::Stream {
            topology,
            w_in,
            block,
            cfg,
            ..
        } => {
            let mut b = Mat::zeros(topology.size(), count);
            stream_states(topology, w_in, xi, first, *block, cfg, |k0, states| {
                let r0 = k0 - first;
                let slice = phi.as_ref().subrows(r0, states.nrows());
                matmul(b.as_mut(), Accum::Add, states.transpose(), slice, 1.0, Par::Seq);
            })?;
            b
        }
    };
    let caps = est.capacities(b.as_ref(), &power);
    Ok(safety * caps.into_iter().fold(0.0, f64::max))
}
