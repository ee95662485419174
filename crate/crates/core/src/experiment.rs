//! Ensemble orchestration, seeding and result persistence.
//!
//! Every ensemble member is an independent task keyed by `(kind, p, member)`.
//! All randomness a task uses comes from seeds derived from that key, and
//! results are collected in task order, so the table is the same for any
//! number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipc::{compute_ipc, IpcOptions, IpcSchedule, MAX_DEGREE};
use crate::mackey_glass::{self, MackeyGlassParams, TimeSeries};
use crate::metrics::{self, median_mad, MACKEY_GLASS_LAMBDA1, NMSE_THRESHOLD};
use crate::reservoir::{
    collect_states, init_input_matrix, open_loop_from, predict_closed_loop, train_readout,
    InputMatrix, ReservoirConfig,
};
use crate::topology::{build_topology, ws_degree, ReservoirTopology, TopologyKind};

/// What a seed is used for within one ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeedRole {
    Connectivity,
    Weights,
    Input,
    Series,
    IpcInput,
}

impl SeedRole {
    fn tag(self) -> u64 {
        match self {
            SeedRole::Connectivity => 1,
            SeedRole::Weights => 2,
            SeedRole::Input => 3,
            SeedRole::Series => 4,
            SeedRole::IpcInput => 5,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn kind_tag(kind: TopologyKind) -> u64 {
    TopologyKind::ALL
        .iter()
        .position(|k| *k == kind)
        .expect("kind is listed in ALL") as u64
        + 1
}

/// Seed for one random stream of one ensemble member. Each field is folded
/// in with a full splitmix64 round so that any change reaches every bit.
pub fn derive_seed(
    base_seed: u64,
    kind: TopologyKind,
    p: Option<f64>,
    member: u64,
    role: SeedRole,
) -> u64 {
    let p_bits = p.map_or(u64::MAX, f64::to_bits);
    [kind_tag(kind), p_bits, member, role.tag()]
        .into_iter()
        .fold(splitmix64(base_seed), |h, v| splitmix64(h ^ splitmix64(v)))
}

fn rng_for(cfg: &ExperimentConfig, kind: TopologyKind, p: Option<f64>, member: u64, role: SeedRole) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.base_seed, kind, p, member, role))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kinds: Vec<TopologyKind>,
    /// Rewiring probabilities for the Watts-Strogatz sweep.
    pub ws_p_grid: Vec<f64>,
    /// Members per (kind, p) for the forecasting benchmark.
    pub ensemble_size: usize,
    /// Members per kind for the capacity suite.
    pub ipc_ensemble_size: usize,
    /// Rewiring probability used for Watts-Strogatz kinds in the capacity suite.
    pub ipc_ws_p: f64,
    pub base_seed: u64,
    /// All members of all kinds share one Mackey-Glass record.
    pub shared_series: bool,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub output: Option<PathBuf>,
    pub reservoir: ReservoirConfig,
    pub mackey_glass: MackeyGlassParams,
    pub ipc: IpcSchedule,
    pub ipc_options: IpcOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kinds: TopologyKind::ALL.to_vec(),
            ws_p_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            ensemble_size: 100,
            ipc_ensemble_size: 40,
            ipc_ws_p: 1.0,
            base_seed: 0,
            shared_series: false,
            threads: 0,
            output: None,
            reservoir: ReservoirConfig::default(),
            mackey_glass: MackeyGlassParams::default(),
            ipc: IpcSchedule::full(),
            ipc_options: IpcOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced preset: 128 nodes, 10 members, capacity up to degree 3 with
    /// 100k inputs. Density is raised so the mean degree stays at 8.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.apply_desk_scale();
        cfg
    }

    pub fn apply_desk_scale(&mut self) {
        self.reservoir.n_r = 128;
        self.reservoir.density = 0.064;
        self.ensemble_size = 10;
        self.ipc_ensemble_size = 10;
        self.ipc = IpcSchedule::desk();
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::param("no topology kinds selected"));
        }
        if self.ensemble_size == 0 || self.ipc_ensemble_size == 0 {
            return Err(Error::param("ensemble sizes must be at least 1"));
        }
        if self.ws_p_grid.iter().chain([&self.ipc_ws_p]).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("rewiring probabilities must lie in [0, 1]"));
        }
        self.reservoir.validate()?;
        self.mackey_glass.delay_slots()?;
        self.ipc.validate()?;
        if self.kinds.iter().any(|k| k.is_watts_strogatz()) {
            if self.ws_p_grid.is_empty() {
                return Err(Error::param("Watts-Strogatz kinds need a nonempty p grid"));
            }
            ws_degree(self.reservoir.n_r, self.reservoir.density)?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("<config>", e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("<config>", e.to_string()))
    }

    /// `(kind, p)` pairs of the forecasting benchmark; `p` is `None` for
    /// kinds without rewiring.
    pub fn bench_cells(&self) -> Vec<(TopologyKind, Option<f64>)> {
        self.kinds
            .iter()
            .flat_map(|&k| {
                if k.is_watts_strogatz() {
                    self.ws_p_grid.iter().map(|&p| (k, Some(p))).collect::<Vec<_>>()
                } else {
                    vec![(k, None)]
                }
            })
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Resource(format!("cannot start worker pool: {e}")))
    }
}

/// Which forecasting scores a benchmark run computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Open,
    Closed,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Bench,
    Ipc,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Bench => "bench",
            Suite::Ipc => "ipc",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bench" => Ok(Suite::Bench),
            "ipc" => Ok(Suite::Ipc),
            _ => Err(Error::param(format!("unknown suite {s:?}"))),
        }
    }
}

/// One ensemble member. Missing scores were not requested; a failed member
/// carries `mse = inf` and `t_vp = 0` and a non-"ok" status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub suite: Suite,
    pub kind: TopologyKind,
    pub p: Option<f64>,
    pub member: usize,
    /// Connectivity seed of the member, as an identifier.
    pub seed: u64,
    pub status: String,
    #[serde(with = "float_repr::opt")]
    pub mse_open: Option<f64>,
    #[serde(with = "float_repr::opt")]
    pub mse_closed: Option<f64>,
    pub t_vp: Option<f64>,
    pub t_vp_set_max: Option<f64>,
    #[serde(with = "float_repr::opt")]
    pub train_mse: Option<f64>,
    pub ipc_total: Option<f64>,
    pub ipc_per_degree: BTreeMap<u32, f64>,
    pub wall_time: f64,
}

impl ResultRow {
    fn new(suite: Suite, kind: TopologyKind, p: Option<f64>, member: usize, seed: u64) -> Self {
        Self {
            suite,
            kind,
            p,
            member,
            seed,
            status: "ok".into(),
            mse_open: None,
            mse_closed: None,
            t_vp: None,
            t_vp_set_max: None,
            train_mse: None,
            ipc_total: None,
            ipc_per_degree: BTreeMap::new(),
            wall_time: 0.0,
        }
    }

    /// Named scores present on this row, in fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let named = [
            ("mse_open", self.mse_open),
            ("mse_closed", self.mse_closed),
            ("t_vp", self.t_vp),
            ("t_vp_set_max", self.t_vp_set_max),
            ("ipc_total", self.ipc_total),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        }
        for (d, v) in &self.ipc_per_degree {
            out.push((format!("ipc_d{d}"), *v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub suite: Suite,
    pub kind: TopologyKind,
    pub p: Option<f64>,
    pub metric: String,
    #[serde(with = "float_repr")]
    pub median: f64,
    #[serde(with = "float_repr")]
    pub mad: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

type CellKey = (Suite, TopologyKind, Option<u64>);

impl ResultsTable {
    pub fn from_rows(rows: Vec<ResultRow>) -> Result<Self> {
        let aggregates = aggregate(&rows)?;
        Ok(Self { rows, aggregates })
    }

    /// Appends another table's rows and recomputes aggregates.
    pub fn extend(&mut self, other: ResultsTable) -> Result<()> {
        self.rows.extend(other.rows);
        self.aggregates = aggregate(&self.rows)?;
        Ok(())
    }

    /// Copy with timing zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.rows.iter_mut().for_each(|r| r.wall_time = 0.0);
        t
    }

    pub fn aggregate(
        &self,
        suite: Suite,
        kind: TopologyKind,
        p: Option<f64>,
        metric: &str,
    ) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.suite == suite && a.kind == kind && a.p == p && a.metric == metric)
    }
}

/// Median and MAD per `(suite, kind, p, metric)`, cells in order of first
/// appearance.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<AggregateRow>> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut cells: BTreeMap<CellKey, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut metric_order: BTreeMap<CellKey, Vec<String>> = BTreeMap::new();
    for r in rows {
        let key = (r.suite, r.kind, r.p.map(f64::to_bits));
        if !cells.contains_key(&key) {
            order.push(key);
        }
        let cell = cells.entry(key).or_default();
        let names = metric_order.entry(key).or_default();
        for (name, v) in r.metrics() {
            if !cell.contains_key(&name) {
                names.push(name.clone());
            }
            cell.entry(name).or_default().push(v);
        }
    }
    let mut out = Vec::new();
    for key in order {
        for name in &metric_order[&key] {
            let stat = median_mad(&cells[&key][name])?;
            out.push(AggregateRow {
                suite: key.0,
                kind: key.1,
                p: key.2.map(f64::from_bits),
                metric: name.clone(),
                median: stat.median,
                mad: stat.mad,
                n: stat.n_samples,
            });
        }
    }
    Ok(out)
}

/// Mackey-Glass drive for one member, rescaled to `[-1, 1]`.
pub fn member_series(
    cfg: &ExperimentConfig,
    kind: TopologyKind,
    p: Option<f64>,
    member: usize,
) -> Result<TimeSeries> {
    let mut rng = if cfg.shared_series {
        rng_for(cfg, TopologyKind::RandomAsym, None, 0, SeedRole::Series)
    } else {
        rng_for(cfg, kind, p, member as u64, SeedRole::Series)
    };
    let raw = mackey_glass::generate(&cfg.mackey_glass, cfg.reservoir.required_drive_len(), &mut rng)?;
    Ok(mackey_glass::rescale(&raw)?.0)
}

/// Topology and input weights for one member.
pub fn member_reservoir(
    cfg: &ExperimentConfig,
    kind: TopologyKind,
    p: Option<f64>,
    member: usize,
) -> Result<(ReservoirTopology, InputMatrix)> {
    let m = member as u64;
    let res = &cfg.reservoir;
    let topo = build_topology(
        kind,
        res.n_r,
        res.density,
        p.unwrap_or(0.0),
        res.rho_opt,
        &mut rng_for(cfg, kind, p, m, SeedRole::Connectivity),
        &mut rng_for(cfg, kind, p, m, SeedRole::Weights),
    )?;
    let w_in = init_input_matrix(res.n_r, 1, res.input_scale, &mut rng_for(cfg, kind, p, m, SeedRole::Input))?;
    Ok((topo, w_in))
}

/// Scores one forecasting member; errors inside the member become sentinels.
fn bench_member(
    cfg: &ExperimentConfig,
    kind: TopologyKind,
    p: Option<f64>,
    member: usize,
    mode: BenchMode,
) -> ResultRow {
    let start = Instant::now();
    let seed = derive_seed(cfg.base_seed, kind, p, member as u64, SeedRole::Connectivity);
    let mut row = ResultRow::new(Suite::Bench, kind, p, member, seed);
    if let Err(e) = score_member(cfg, kind, p, member, mode, &mut row) {
        row.status = e.to_string();
        let open = matches!(mode, BenchMode::Open | BenchMode::Both);
        let closed = matches!(mode, BenchMode::Closed | BenchMode::Both);
        if open && row.mse_open.is_none() {
            row.mse_open = Some(f64::INFINITY);
        }
        if closed {
            row.mse_closed = Some(f64::INFINITY);
            row.t_vp = Some(0.0);
            row.t_vp_set_max = Some(0.0);
        }
    }
    row.wall_time = start.elapsed().as_secs_f64();
    row
}

fn score_member(
    cfg: &ExperimentConfig,
    kind: TopologyKind,
    p: Option<f64>,
    member: usize,
    mode: BenchMode,
    row: &mut ResultRow,
) -> Result<()> {
    let res = &cfg.reservoir;
    let (topo, w_in) = member_reservoir(cfg, kind, p, member)?;
    let drive = member_series(cfg, kind, p, member)?;
    let collected = collect_states(&topo, &w_in, &drive, res)?;
    let readout = train_readout(&collected.states, &collected.targets, res.gamma)?;
    row.train_mse = Some(readout.train_mse);
    let start = res.n0 + res.n1;
    let truth = &drive.values[start + 1..start + 1 + res.n2];

    if matches!(mode, BenchMode::Open | BenchMode::Both) {
        let inputs = &drive.values[start..start + res.n2];
        let pred = open_loop_from(&readout, &topo, &w_in, &collected.final_state, inputs, res)?;
        row.mse_open = Some(metrics::mse(&pred, truth)?);
    }
    if matches!(mode, BenchMode::Closed | BenchMode::Both) {
        let pred = predict_closed_loop(
            &readout,
            &topo,
            &w_in,
            &collected.final_state,
            drive.values[start],
            res.n2,
            res,
        )?;
        let s = metrics::score(
            &pred,
            truth,
            (res.n2 / 4).max(1),
            MACKEY_GLASS_LAMBDA1,
            drive.step,
            NMSE_THRESHOLD,
        )?;
        row.mse_closed = Some(s.mse);
        row.t_vp = Some(s.t_vp_lyapunov);
        row.t_vp_set_max = Some(s.t_vp_set_max);
    }
    Ok(())
}

/// Forecasting benchmark over every `(kind, p, member)` cell.
pub fn run_benchmark(cfg: &ExperimentConfig, mode: BenchMode) -> Result<ResultsTable> {
    cfg.validate()?;
    faer::set_global_parallelism(faer::Par::Seq);
    let tasks: Vec<(TopologyKind, Option<f64>, usize)> = cfg
        .bench_cells()
        .into_iter()
        .flat_map(|(k, p)| (0..cfg.ensemble_size).map(move |m| (k, p, m)))
        .collect();
    let rows = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(k, p, m)| bench_member(cfg, k, p, m, mode))
            .collect::<Vec<_>>()
    });
    ResultsTable::from_rows(rows)
}

fn ipc_member(cfg: &ExperimentConfig, kind: TopologyKind, member: usize) -> ResultRow {
    let start = Instant::now();
    let p = kind.is_watts_strogatz().then_some(cfg.ipc_ws_p);
    let seed = derive_seed(cfg.base_seed, kind, p, member as u64, SeedRole::Connectivity);
    let mut row = ResultRow::new(Suite::Ipc, kind, p, member, seed);
    let result = member_reservoir(cfg, kind, p, member).and_then(|(topo, w_in)| {
        let mut rng = rng_for(cfg, kind, p, member as u64, SeedRole::IpcInput);
        compute_ipc(&topo, &w_in, &cfg.ipc, &cfg.reservoir, &cfg.ipc_options, &mut rng)
    });
    match result {
        Ok(profile) => {
            row.ipc_total = Some(profile.total);
            row.ipc_per_degree = profile.per_degree;
        }
        Err(e) => {
            row.status = e.to_string();
            row.ipc_total = Some(0.0);
        }
    }
    row.wall_time = start.elapsed().as_secs_f64();
    row
}

/// Capacity profiles for every kind and member.
pub fn run_ipc_suite(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    if let crate::ipc::StateStorage::InMemory = cfg.ipc_options.storage {
        // fail once up front instead of once per member
        let need = cfg
            .ipc
            .rows()
            .saturating_mul(cfg.reservoir.n_r + cfg.ipc_options.basis_chunk)
            .saturating_mul(8);
        if need > cfg.ipc_options.memory_limit_bytes {
            return Err(Error::Resource(format!(
                "in-memory capacity states need about {} MiB; use streaming state storage",
                need >> 20
            )));
        }
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let tasks: Vec<(TopologyKind, usize)> = cfg
        .kinds
        .iter()
        .flat_map(|&k| (0..cfg.ipc_ensemble_size).map(move |m| (k, m)))
        .collect();
    let rows = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(k, m)| ipc_member(cfg, k, m))
            .collect::<Vec<_>>()
    });
    ResultsTable::from_rows(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::param(format!("unknown output format {s:?}"))),
        }
    }
}

const ROW_HEADER_FIXED: [&str; 11] = [
    "suite",
    "kind",
    "p",
    "member",
    "seed",
    "status",
    "mse_open",
    "mse_closed",
    "t_vp",
    "t_vp_set_max",
    "train_mse",
];
const AGG_HEADER: [&str; 7] = ["suite", "kind", "p", "metric", "median", "mad", "n"];

fn row_header() -> Vec<String> {
    let mut h: Vec<String> = ROW_HEADER_FIXED.iter().map(|s| s.to_string()).collect();
    h.push("ipc_total".into());
    h.extend((1..=MAX_DEGREE).map(|d| format!("ipc_d{d}")));
    h.push("wall_time".into());
    h
}

/// 17 significant digits; infinities as `inf` / `-inf`.
pub fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_float(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Sibling path for the aggregate CSV: `out.csv` -> `out.agg.csv`.
pub fn aggregate_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.agg.csv"))
}

#[derive(Serialize, Deserialize)]
struct JsonDocument {
    config: Option<ExperimentConfig>,
    rows: Vec<ResultRow>,
    aggregates: Vec<AggregateRow>,
}

/// Writes the table. CSV goes to `path` with aggregates in
/// [`aggregate_path`]; JSON is a single document including `config`.
pub fn emit_results(
    table: &ResultsTable,
    path: &Path,
    format: OutputFormat,
    config: Option<&ExperimentConfig>,
) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            write_rows_csv(table, path)?;
            write_aggregates_csv(table, &aggregate_path(path))
        }
        OutputFormat::Json => {
            let doc = JsonDocument {
                config: config.cloned(),
                rows: table.rows.clone(),
                aggregates: table.aggregates.clone(),
            };
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)
                .map_err(|e| Error::format(path, e.to_string()))
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn write_rows_csv(table: &ResultsTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(row_header()).map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let mut rec = vec![
            r.suite.to_string(),
            r.kind.label().to_string(),
            opt_field(r.p),
            r.member.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            opt_field(r.mse_open),
            opt_field(r.mse_closed),
            opt_field(r.t_vp),
            opt_field(r.t_vp_set_max),
            opt_field(r.train_mse),
            opt_field(r.ipc_total),
        ];
        rec.extend((1..=MAX_DEGREE).map(|d| opt_field(r.ipc_per_degree.get(&d).copied())));
        rec.push(format_float(r.wall_time));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_aggregates_csv(table: &ResultsTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(AGG_HEADER).map_err(|e| csv_err(path, e))?;
    for a in &table.aggregates {
        w.write_record([
            a.suite.to_string(),
            a.kind.label().to_string(),
            opt_field(a.p),
            a.metric.clone(),
            format_float(a.median),
            format_float(a.mad),
            a.n.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    rec: &'a csv::StringRecord,
}

impl Fields<'_> {
    fn get(&self, i: usize) -> Result<&str> {
        self.rec
            .get(i)
            .ok_or_else(|| Error::format(self.path, format!("line {}: missing column {i}", self.line)))
    }

    fn bad(&self, what: &str) -> Error {
        Error::format(self.path, format!("line {}: bad {what}", self.line))
    }

    fn float(&self, i: usize, what: &str) -> Result<f64> {
        parse_float(self.get(i)?).ok_or_else(|| self.bad(what))
    }

    fn opt_float(&self, i: usize, what: &str) -> Result<Option<f64>> {
        let s = self.get(i)?;
        if s.is_empty() {
            Ok(None)
        } else {
            parse_float(s).map(Some).ok_or_else(|| self.bad(what))
        }
    }

    fn parse<T: FromStr>(&self, i: usize, what: &str) -> Result<T> {
        self.get(i)?.parse().map_err(|_| self.bad(what))
    }
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[String]) -> Result<()> {
    if got.iter().ne(want.iter().map(String::as_str)) {
        return Err(Error::format(path, "unexpected CSV header"));
    }
    Ok(())
}

/// Reads a table written by [`emit_results`] in CSV form.
pub fn read_results_csv(path: &Path) -> Result<ResultsTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, r.headers().map_err(|e| csv_err(path, e))?, &row_header())?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = Fields { path, line: i + 2, rec: &rec };
        let mut row = ResultRow::new(
            f.parse(0, "suite")?,
            f.parse(1, "kind")?,
            f.opt_float(2, "p")?,
            f.parse(3, "member")?,
            f.parse(4, "seed")?,
        );
        row.status = f.get(5)?.to_string();
        row.mse_open = f.opt_float(6, "mse_open")?;
        row.mse_closed = f.opt_float(7, "mse_closed")?;
        row.t_vp = f.opt_float(8, "t_vp")?;
        row.t_vp_set_max = f.opt_float(9, "t_vp_set_max")?;
        row.train_mse = f.opt_float(10, "train_mse")?;
        row.ipc_total = f.opt_float(11, "ipc_total")?;
        for d in 1..=MAX_DEGREE {
            if let Some(v) = f.opt_float(11 + d as usize, "ipc degree")? {
                row.ipc_per_degree.insert(d, v);
            }
        }
        row.wall_time = f.float(12 + MAX_DEGREE as usize, "wall_time")?;
        rows.push(row);
    }

    let agg_path = aggregate_path(path);
    let mut r = csv::Reader::from_path(&agg_path).map_err(|e| csv_err(&agg_path, e))?;
    let want: Vec<String> = AGG_HEADER.iter().map(|s| s.to_string()).collect();
    check_header(&agg_path, r.headers().map_err(|e| csv_err(&agg_path, e))?, &want)?;
    let mut aggregates = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&agg_path, e))?;
        let f = Fields { path: &agg_path, line: i + 2, rec: &rec };
        aggregates.push(AggregateRow {
            suite: f.parse(0, "suite")?,
            kind: f.parse(1, "kind")?,
            p: f.opt_float(2, "p")?,
            metric: f.get(3)?.to_string(),
            median: f.float(4, "median")?,
            mad: f.float(5, "mad")?,
            n: f.parse(6, "n")?,
        });
    }
    Ok(ResultsTable { rows, aggregates })
}

/// Reads a JSON table and the config it was produced with, if recorded.
pub fn read_results_json(path: &Path) -> Result<(ResultsTable, Option<ExperimentConfig>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: JsonDocument = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((
        ResultsTable {
            rows: doc.rows,
            aggregates: doc.aggregates,
        },
        doc.config,
    ))
}

/// JSON has no infinity; non-finite values travel as strings.
mod float_repr {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_float(*v))
        }
    }

    struct FloatVisitor;

    impl Visitor<'_> for FloatVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            super::parse_float(v).ok_or_else(|| E::custom(format!("bad float {v:?}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(FloatVisitor)
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        #[derive(Serialize, Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(Wrap).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}
