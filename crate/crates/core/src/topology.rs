//! Reservoir connectivity, weights and the composed, spectrally normalized
//! reservoir matrix `W = A ⊙ Wc`.
//!
//! Five reservoir families are supported, named by the symmetry of the
//! connection matrix `A` and of the weight matrix `Wc`:
//!
//! | kind   | `A`                         | `Wc`       |
//! |--------|-----------------------------|------------|
//! | `R-A`  | random, directed            | asymmetric |
//! | `RS-A` | random, undirected          | asymmetric |
//! | `RS-S` | random, undirected          | symmetric  |
//! | `WS-A` | Watts-Strogatz, undirected  | asymmetric |
//! | `WS-S` | Watts-Strogatz, undirected  | symmetric  |

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use faer::Mat;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// How the binary connection matrix is generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConnectivityKind {
    RandomAsym,
    RandomSym,
    /// Ring lattice of even degree `k`, each edge rewired with probability `p`.
    WattsStrogatz { p: f64, k: usize },
}

impl ConnectivityKind {
    pub fn is_symmetric(&self) -> bool {
        !matches!(self, ConnectivityKind::RandomAsym)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

/// The five reservoir families compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopologyKind {
    #[serde(rename = "R-A")]
    RandomAsym,
    #[serde(rename = "RS-A")]
    RandomSymAsymWeights,
    #[serde(rename = "RS-S")]
    RandomSymSymWeights,
    #[serde(rename = "WS-A")]
    WattsStrogatzAsymWeights,
    #[serde(rename = "WS-S")]
    WattsStrogatzSymWeights,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 5] = [
        TopologyKind::RandomAsym,
        TopologyKind::RandomSymAsymWeights,
        TopologyKind::RandomSymSymWeights,
        TopologyKind::WattsStrogatzAsymWeights,
        TopologyKind::WattsStrogatzSymWeights,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TopologyKind::RandomAsym => "R-A",
            TopologyKind::RandomSymAsymWeights => "RS-A",
            TopologyKind::RandomSymSymWeights => "RS-S",
            TopologyKind::WattsStrogatzAsymWeights => "WS-A",
            TopologyKind::WattsStrogatzSymWeights => "WS-S",
        }
    }

    pub fn is_watts_strogatz(&self) -> bool {
        matches!(
            self,
            TopologyKind::WattsStrogatzAsymWeights | TopologyKind::WattsStrogatzSymWeights
        )
    }

    pub fn weight_symmetry(&self) -> Symmetry {
        match self {
            TopologyKind::RandomSymSymWeights | TopologyKind::WattsStrogatzSymWeights => {
                Symmetry::Symmetric
            }
            _ => Symmetry::Asymmetric,
        }
    }

    /// Connectivity recipe for this family. `ws_p` is only used by the
    /// Watts-Strogatz kinds.
    pub fn connectivity(&self, n: usize, density: f64, ws_p: f64) -> Result<ConnectivityKind> {
        Ok(match self {
            TopologyKind::RandomAsym => ConnectivityKind::RandomAsym,
            TopologyKind::RandomSymAsymWeights | TopologyKind::RandomSymSymWeights => {
                ConnectivityKind::RandomSym
            }
            _ => ConnectivityKind::WattsStrogatz {
                p: ws_p,
                k: ws_degree(n, density)?,
            },
        })
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::param(format!("unknown topology kind {s:?}")))
    }
}

/// Lattice degree for the Watts-Strogatz kinds: `round(density * n)` rounded
/// down to the nearest even number.
pub fn ws_degree(n: usize, density: f64) -> Result<usize> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::param(format!("density must lie in (0, 1), got {density}")));
    }
    let k = (density * n as f64).round() as usize;
    let k = k - k % 2;
    if k < 2 || k >= n {
        return Err(Error::param(format!(
            "density {density} gives lattice degree {k}, need an even value in [2, {n})"
        )));
    }
    Ok(k)
}

/// Binary adjacency. Entry `(i, j) = 1` means node `j` feeds node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    n: usize,
    entries: Vec<bool>,
    kind: ConnectivityKind,
}

impl ConnectivityMatrix {
    /// Wraps an explicit adjacency, validating the zero diagonal.
    pub fn from_entries(n: usize, entries: Vec<bool>, kind: ConnectivityKind) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::contract(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        if (0..n).any(|i| entries[i * n + i]) {
            return Err(Error::param("self-loops are not allowed"));
        }
        let m = Self { n, entries, kind };
        if kind.is_symmetric() && !m.is_symmetric() {
            return Err(Error::param("symmetric kind with asymmetric entries"));
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> ConnectivityKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n;
        (0..n).all(|i| (i + 1..n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Row-major list of `(i, j)` with `A_ij = 1`.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(move |(idx, _)| (idx / n, idx % n))
    }
}

/// Real weights `Wc`, zero off the support of the connection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    entries: Vec<f64>,
    symmetry: Symmetry,
}

impl WeightMatrix {
    /// Row-major `n x n` weights; symmetric weights must equal their transpose.
    pub fn from_entries(n: usize, entries: Vec<f64>, symmetry: Symmetry) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::contract(format!(
                "{} weights for a {n}x{n} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weight entry".into()));
        }
        if symmetry == Symmetry::Symmetric
            && (0..n).any(|i| (0..i).any(|j| entries[i * n + j] != entries[j * n + i]))
        {
            return Err(Error::param("symmetric weights must equal their transpose"));
        }
        Ok(Self { n, entries, symmetry })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Composed reservoir. `w` is `A ⊙ Wc` scaled to spectral radius `rho_target`.
#[derive(Debug, Clone)]
pub struct ReservoirTopology {
    pub connectivity: ConnectivityMatrix,
    pub weights: WeightMatrix,
    pub w: Mat<f64>,
    pub sparse: CsrMatrix,
    pub kind: Option<TopologyKind>,
    pub rho_target: f64,
    /// Spectral radius of the unscaled product.
    pub raw_radius: f64,
}

impl ReservoirTopology {
    pub fn size(&self) -> usize {
        self.w.nrows()
    }

    /// Wraps an explicit recurrent matrix without rescaling it. The support
    /// of `w` becomes the connection matrix; the diagonal must be zero.
    pub fn from_matrix(w: Mat<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::contract("recurrent matrix must be square"));
        }
        let radius = spectral_radius(&w)?;
        let entries: Vec<bool> = (0..n * n).map(|k| w[(k / n, k % n)] != 0.0).collect();
        let symmetric = (0..n).all(|i| (0..i).all(|j| w[(i, j)] == w[(j, i)]));
        let (kind, symmetry) = if symmetric {
            (ConnectivityKind::RandomSym, Symmetry::Symmetric)
        } else {
            (ConnectivityKind::RandomAsym, Symmetry::Asymmetric)
        };
        let connectivity = ConnectivityMatrix::from_entries(n, entries, kind)?;
        let weights =
            WeightMatrix::from_entries(n, (0..n * n).map(|k| w[(k / n, k % n)]).collect(), symmetry)?;
        let sparse = CsrMatrix::from_dense(&w);
        Ok(Self {
            connectivity,
            weights,
            w,
            sparse,
            kind: None,
            rho_target: radius,
            raw_radius: radius,
        })
    }
}

/// In- and out-degree histograms (degree -> node count).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DegreeHistogram {
    pub in_counts: BTreeMap<usize, usize>,
    pub out_counts: BTreeMap<usize, usize>,
}

/// Samples a connection matrix.
///
/// `RandomAsym` places exactly `round(density * n^2)` directed edges drawn
/// without replacement from the off-diagonal positions. `RandomSym` places
/// `floor(density * n^2 / 2)` undirected edges and mirrors them. For
/// `WattsStrogatz` the `density` argument is ignored and `k` is taken from
/// the kind itself.
pub fn build_connectivity(
    kind: ConnectivityKind,
    n: usize,
    density: f64,
    rng: &mut impl Rng,
) -> Result<ConnectivityMatrix> {
    if n < 2 {
        return Err(Error::param(format!("need at least 2 nodes, got {n}")));
    }
    let mut entries = vec![false; n * n];
    match kind {
        ConnectivityKind::RandomAsym => {
            check_density(density)?;
            let slots = n * (n - 1);
            let count = (density * (n * n) as f64).round() as usize;
            if count > slots {
                return Err(Error::param(format!("density {density} exceeds the off-diagonal capacity")));
            }
            for t in index::sample(rng, slots, count).into_iter() {
                let i = t / (n - 1);
                let mut j = t % (n - 1);
                if j >= i {
                    j += 1;
                }
                entries[i * n + j] = true;
            }
        }
        ConnectivityKind::RandomSym => {
            check_density(density)?;
            let pairs = n * (n - 1) / 2;
            let count = (density * (n * n) as f64 / 2.0).floor() as usize;
            if count > pairs {
                return Err(Error::param(format!("density {density} exceeds the pair capacity")));
            }
            for t in index::sample(rng, pairs, count).into_iter() {
                let (i, j) = upper_pair(n, t);
                entries[i * n + j] = true;
                entries[j * n + i] = true;
            }
        }
        ConnectivityKind::WattsStrogatz { p, k } => {
            watts_strogatz(n, k, p, rng, &mut entries)?;
        }
    }
    ConnectivityMatrix::from_entries(n, entries, kind)
}

fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("density must lie in (0, 1), got {density}")))
    }
}

/// Maps a linear index over the strict upper triangle (row-major) to `(i, j)`.
fn upper_pair(n: usize, mut t: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row_len = n - 1 - i;
        if t < row_len {
            return (i, i + 1 + t);
        }
        t -= row_len;
        i += 1;
    }
}

fn watts_strogatz(
    n: usize,
    k: usize,
    p: f64,
    rng: &mut impl Rng,
    entries: &mut [bool],
) -> Result<()> {
    if !k.is_multiple_of(2) || k < 2 || k >= n {
        return Err(Error::param(format!(
            "lattice degree must be even with 2 <= k < n, got k={k}, n={n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("rewiring probability must lie in [0, 1], got {p}")));
    }
    let mut degree = vec![k; n];
    for u in 0..n {
        for off in 1..=k / 2 {
            let v = (u + off) % n;
            entries[u * n + v] = true;
            entries[v * n + u] = true;
        }
    }
    // Rewire in lattice-offset order, the way the classic generator does.
    for off in 1..=k / 2 {
        for u in 0..n {
            let v = (u + off) % n;
            if !(rng.random::<f64>() < p) {
                continue;
            }
            if degree[u] >= n - 1 {
                return Err(Error::Construction(format!(
                    "node {u} is connected to every other node, no rewiring target left"
                )));
            }
            let w = loop {
                let w = rng.random_range(0..n);
                if w != u && !entries[u * n + w] {
                    break w;
                }
            };
            entries[u * n + v] = false;
            entries[v * n + u] = false;
            entries[u * n + w] = true;
            entries[w * n + u] = true;
            degree[v] -= 1;
            degree[w] += 1;
        }
    }
    Ok(())
}

/// Draws uniform `[-0.5, 0.5]` weights on the support of `a`.
///
/// With `Symmetric`, a single value is drawn per undirected pair `i < j` and
/// mirrored, which requires `a` to be symmetric.
pub fn build_weight_matrix(
    a: &ConnectivityMatrix,
    symmetry: Symmetry,
    rng: &mut impl Rng,
) -> Result<WeightMatrix> {
    let n = a.size();
    if symmetry == Symmetry::Symmetric && !a.is_symmetric() {
        return Err(Error::param(
            "symmetric weights require a symmetric connection matrix",
        ));
    }
    let mut entries = vec![0.0; n * n];
    match symmetry {
        Symmetry::Asymmetric => {
            for (i, j) in a.support() {
                entries[i * n + j] = rng.random_range(-0.5..=0.5);
            }
        }
        Symmetry::Symmetric => {
            for (i, j) in a.support().filter(|&(i, j)| i < j) {
                let w = rng.random_range(-0.5..=0.5);
                entries[i * n + j] = w;
                entries[j * n + i] = w;
            }
        }
    }
    Ok(WeightMatrix {
        n,
        entries,
        symmetry,
    })
}

/// Largest eigenvalue magnitude, from a dense eigenvalue decomposition.
///
/// The matrices here are sparse but at most a few thousand nodes, so a
/// dense solve is affordable and handles complex dominant pairs that trip up
/// power iteration.
pub fn spectral_radius(m: &Mat<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::contract(format!(
            "spectral radius of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    for j in 0..m.ncols() {
        if m.col(j).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry in column {j}")));
        }
    }
    let eig = m
        .eigenvalues()
        .map_err(|e| Error::Solver(format!("eigenvalue computation failed: {e:?}")))?;
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Forms `A ⊙ Wc` and rescales it to spectral radius `rho_target`.
pub fn compose_reservoir(
    a: &ConnectivityMatrix,
    wc: &WeightMatrix,
    rho_target: f64,
) -> Result<ReservoirTopology> {
    let n = a.size();
    if wc.size() != n {
        return Err(Error::contract(format!(
            "connection matrix is {n}x{n} but weights are {0}x{0}",
            wc.size()
        )));
    }
    if !(rho_target > 0.0 && rho_target.is_finite()) {
        return Err(Error::param(format!("rho_target must be positive, got {rho_target}")));
    }
    let raw = Mat::from_fn(n, n, |i, j| if a.get(i, j) { wc.get(i, j) } else { 0.0 });
    let raw_radius = spectral_radius(&raw)?;
    if !(raw_radius > 0.0) {
        return Err(Error::Normalization { radius: raw_radius });
    }
    let scale = rho_target / raw_radius;
    let w = Mat::from_fn(n, n, |i, j| raw[(i, j)] * scale);
    let sparse = CsrMatrix::from_dense(&w);
    Ok(ReservoirTopology {
        connectivity: a.clone(),
        weights: wc.clone(),
        w,
        sparse,
        kind: None,
        rho_target,
        raw_radius,
    })
}

/// Builds one of the five reservoir families end to end.
pub fn build_topology(
    kind: TopologyKind,
    n: usize,
    density: f64,
    ws_p: f64,
    rho_target: f64,
    connectivity_rng: &mut impl Rng,
    weight_rng: &mut impl Rng,
) -> Result<ReservoirTopology> {
    let conn = kind.connectivity(n, density, ws_p)?;
    let a = build_connectivity(conn, n, density, connectivity_rng)?;
    let wc = build_weight_matrix(&a, kind.weight_symmetry(), weight_rng)?;
    let mut topo = compose_reservoir(&a, &wc, rho_target)?;
    topo.kind = Some(kind);
    Ok(topo)
}

pub fn degree_distribution(a: &ConnectivityMatrix) -> DegreeHistogram {
    let n = a.size();
    let mut in_deg = vec![0usize; n];
    let mut out_deg = vec![0usize; n];
    for (i, j) in a.support() {
        // j -> i
        in_deg[i] += 1;
        out_deg[j] += 1;
    }
    let mut hist = DegreeHistogram::default();
    for d in in_deg {
        *hist.in_counts.entry(d).or_default() += 1;
    }
    for d in out_deg {
        *hist.out_counts.entry(d).or_default() += 1;
    }
    hist
}

/// Writes the nonzeros of `W` as `i j w` lines after a `#` header.
pub fn export_triplets(
    topo: &ReservoirTopology,
    seed: u64,
    density: f64,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let kind = topo.kind.map(|k| k.label()).unwrap_or("custom");
    let write = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(
            out,
            "# kind={kind} n={} seed={seed} density={density} rho={}",
            topo.size(),
            topo.rho_target
        )?;
        for (i, j, w) in topo.sparse.triplets() {
            writeln!(out, "{i} {j} {w:.17e}")?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads a triplet file back into a dense `n x n` matrix.
pub fn import_triplets(path: &Path) -> Result<Mat<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut n = None;
    let mut triplets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('#') {
            n = header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix("n="))
                .and_then(|v| v.parse::<usize>().ok())
                .or(n);
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected `i j w`", lineno + 1));
        let mut it = line.split_whitespace();
        let i: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let j: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let w: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        triplets.push((i, j, w));
    }
    let n = n.ok_or_else(|| Error::format(path, "missing `n=` in header"))?;
    let mut m = Mat::zeros(n, n);
    for (i, j, w) in triplets {
        if i >= n || j >= n {
            return Err(Error::format(path, format!("index ({i}, {j}) out of range")));
        }
        m[(i, j)] = w;
    }
    Ok(m)
}
