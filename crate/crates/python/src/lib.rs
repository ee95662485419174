//! Python bindings: topology construction, Mackey-Glass series, echo state
//! network training and prediction, metrics, capacity and the ensemble runners.

use numpy::{PyArray1, PyArray2, PyArrayMethods, PyReadonlyArray1};
use pyo3::exceptions::{PyMemoryError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resbench_core::experiment::{
    run_benchmark as run_bench, run_ipc_suite as run_ipc, BenchMode, ExperimentConfig,
};
use resbench_core::ipc::{IpcOptions, IpcSchedule, StateStorage};
use resbench_core::mackey_glass::{self, MackeyGlassParams, TimeSeries};
use resbench_core::reservoir::{self as res, InputMatrix, ReservoirConfig, ReservoirState, TrainedReadout};
use resbench_core::topology::{self, ReservoirTopology, TopologyKind};
use resbench_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Parameter(_)
        | Error::Contract(_)
        | Error::DegenerateRange(_)
        | Error::NonFinite(_)
        | Error::Normalization { .. } => PyValueError::new_err(e.to_string()),
        Error::Resource(_) => PyMemoryError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<TopologyKind> {
    kind.parse().map_err(to_py)
}

fn slice<'a>(a: &'a PyReadonlyArray1<'_, f64>) -> PyResult<&'a [f64]> {
    a.as_slice().map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix<'py>(py: Python<'py>, m: &faer::Mat<f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    if rows.is_empty() {
        return PyArray1::<f64>::zeros(py, [0], false).reshape([0, m.ncols()]);
    }
    PyArray2::from_vec2(py, &rows).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A composed reservoir matrix.
#[pyclass(name = "Topology", module = "resbench", frozen)]
struct PyTopology {
    inner: ReservoirTopology,
}

#[pymethods]
impl PyTopology {
    /// Builds one of the five kinds: "R-A", "RS-A", "RS-S", "WS-A", "WS-S".
    #[new]
    #[pyo3(signature = (kind, n, density=0.008, ws_p=1.0, rho=1.25, seed=0))]
    fn new(kind: &str, n: usize, density: f64, ws_p: f64, rho: f64, seed: u64) -> PyResult<Self> {
        let inner = topology::build_topology(
            parse_kind(kind)?,
            n,
            density,
            ws_p,
            rho,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn kind(&self) -> Option<String> {
        self.inner.kind.map(|k| k.label().to_string())
    }

    /// Spectral radius before rescaling.
    #[getter]
    fn raw_radius(&self) -> f64 {
        self.inner.raw_radius
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.sparse.nnz()
    }

    /// Dense recurrent matrix.
    #[getter]
    fn w<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        matrix(py, &self.inner.w)
    }

    fn spectral_radius(&self) -> PyResult<f64> {
        topology::spectral_radius(&self.inner.w).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Topology(kind={}, n={}, nnz={})",
            self.inner.kind.map_or("custom", |k| k.label()),
            self.inner.size(),
            self.inner.sparse.nnz()
        )
    }
}

/// Echo state network with a ridge readout.
#[pyclass(name = "EchoStateNetwork", module = "resbench")]
struct PyEsn {
    topology: ReservoirTopology,
    w_in: InputMatrix,
    cfg: ReservoirConfig,
    readout: Option<TrainedReadout>,
    state: Option<ReservoirState>,
}

#[pymethods]
impl PyEsn {
    #[new]
    #[pyo3(signature = (kind="R-A", n_r=1024, density=0.008, ws_p=1.0, rho=1.25, epsilon=0.7, gamma=1e-9, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        n_r: usize,
        density: f64,
        ws_p: f64,
        rho: f64,
        epsilon: f64,
        gamma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let topology = PyTopology::new(kind, n_r, density, ws_p, rho, seed)?.inner;
        let cfg = ReservoirConfig {
            n_r,
            epsilon,
            rho_opt: rho,
            gamma,
            density,
            ..ReservoirConfig::default()
        };
        let w_in = res::init_input_matrix(n_r, 1, cfg.input_scale, &mut ChaCha8Rng::seed_from_u64(!seed))
            .map_err(to_py)?;
        Ok(Self {
            topology,
            w_in,
            cfg,
            readout: None,
            state: None,
        })
    }

    /// Washes out `n0` samples, trains on the next `n1` one-step pairs and
    /// keeps the final state. Returns the training MSE.
    #[pyo3(signature = (series, n0=500, n1=2000))]
    fn fit(&mut self, series: PyReadonlyArray1<'_, f64>, n0: usize, n1: usize) -> PyResult<f64> {
        self.cfg.n0 = n0;
        self.cfg.n1 = n1;
        let drive = TimeSeries::new(slice(&series)?.to_vec(), 1.0);
        let collected = res::collect_states(&self.topology, &self.w_in, &drive, &self.cfg).map_err(to_py)?;
        let readout = res::train_readout(&collected.states, &collected.targets, self.cfg.gamma).map_err(to_py)?;
        let mse = readout.train_mse;
        self.readout = Some(readout);
        self.state = Some(collected.final_state);
        Ok(mse)
    }

    /// One-step predictions for each of `inputs`, starting from the
    /// post-training state. Does not advance the stored state.
    fn predict_open<'py>(
        &self,
        py: Python<'py>,
        inputs: PyReadonlyArray1<'_, f64>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let (readout, state) = self.trained()?;
        let out = res::open_loop_from(readout, &self.topology, &self.w_in, state, slice(&inputs)?, &self.cfg)
            .map_err(to_py)?;
        Ok(PyArray1::from_vec(py, out))
    }

    /// Autonomous rollout of `n` steps, fed `first_input` first.
    fn predict_closed<'py>(&self, py: Python<'py>, first_input: f64, n: usize) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let (readout, state) = self.trained()?;
        let out = res::predict_closed_loop(readout, &self.topology, &self.w_in, state, first_input, n, &self.cfg)
            .map_err(to_py)?;
        Ok(PyArray1::from_vec(py, out))
    }

    #[getter]
    fn w_out<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        matrix(py, &self.trained()?.0.w_out)
    }

    #[getter]
    fn topology(&self) -> PyTopology {
        PyTopology {
            inner: self.topology.clone(),
        }
    }
}

impl PyEsn {
    fn trained(&self) -> PyResult<(&TrainedReadout, &ReservoirState)> {
        match (&self.readout, &self.state) {
            (Some(r), Some(s)) => Ok((r, s)),
            _ => Err(PyRuntimeError::new_err("call fit() first")),
        }
    }
}

/// Mackey-Glass series at unit spacing, rescaled to [-1, 1] unless `raw`.
#[pyfunction]
#[pyo3(signature = (n, seed=0, transient_steps=250_000, raw=false))]
fn mackey_glass_series<'py>(
    py: Python<'py>,
    n: usize,
    seed: u64,
    transient_steps: usize,
    raw: bool,
) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let params = MackeyGlassParams {
        transient_steps,
        ..MackeyGlassParams::default()
    };
    let ts = py
        .detach(|| mackey_glass::generate(&params, n, &mut ChaCha8Rng::seed_from_u64(seed)))
        .map_err(to_py)?;
    let ts = if raw { ts } else { mackey_glass::rescale(&ts).map_err(to_py)?.0 };
    Ok(PyArray1::from_vec(py, ts.values))
}

#[pyfunction]
fn legendre(alpha: u32, x: f64) -> f64 {
    resbench_core::ipc::legendre_eval(alpha, x)
}

#[pyfunction]
fn count_basis(d: u32, max_delay: usize) -> u128 {
    resbench_core::ipc::count_basis(d, max_delay)
}

#[pyfunction]
fn mse(pred: PyReadonlyArray1<'_, f64>, truth: PyReadonlyArray1<'_, f64>) -> PyResult<f64> {
    resbench_core::metrics::mse(slice(&pred)?, slice(&truth)?).map_err(to_py)
}

/// Valid prediction time in Lyapunov units.
#[pyfunction]
#[pyo3(signature = (pred, truth, lambda1=0.007, dt=1.0, threshold=0.25))]
fn valid_prediction_time(
    pred: PyReadonlyArray1<'_, f64>,
    truth: PyReadonlyArray1<'_, f64>,
    lambda1: f64,
    dt: f64,
    threshold: f64,
) -> PyResult<f64> {
    let truth = slice(&truth)?;
    let nmse = resbench_core::metrics::nmse_series(slice(&pred)?, truth, resbench_core::metrics::variance(truth))
        .map_err(to_py)?;
    resbench_core::metrics::valid_prediction_time(&nmse, lambda1, dt, threshold).map_err(to_py)
}

#[pyfunction]
fn median_mad(samples: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = resbench_core::metrics::median_mad(&samples).map_err(to_py)?;
    Ok((s.median, s.mad))
}

/// Capacity profile of a topology. `schedule` is a list of (degree, max delay).
#[pyfunction]
#[pyo3(signature = (topology, schedule, n_inputs=100_000, threshold=1e-4, washout=500, epsilon=0.7, gamma=1e-9, seed=0, streaming=false))]
#[allow(clippy::too_many_arguments)]
fn compute_ipc<'py>(
    py: Python<'py>,
    topology: &PyTopology,
    schedule: Vec<(u32, usize)>,
    n_inputs: usize,
    threshold: f64,
    washout: usize,
    epsilon: f64,
    gamma: f64,
    seed: u64,
    streaming: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let n = topology.inner.size();
    let cfg = ReservoirConfig {
        n_r: n,
        epsilon,
        gamma,
        ..ReservoirConfig::default()
    };
    let schedule = IpcSchedule {
        pairs: schedule,
        n_inputs,
        threshold,
        washout,
    };
    let opts = IpcOptions {
        storage: if streaming {
            StateStorage::Streaming { block: 4096 }
        } else {
            StateStorage::InMemory
        },
        ..IpcOptions::default()
    };
    let w_in = res::init_input_matrix(n, 1, cfg.input_scale, &mut ChaCha8Rng::seed_from_u64(!seed)).map_err(to_py)?;
    let profile = py
        .detach(|| {
            resbench_core::ipc::compute_ipc(
                &topology.inner,
                &w_in,
                &schedule,
                &cfg,
                &opts,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
        })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("total", profile.total)?;
    out.set_item("per_degree", profile.per_degree)?;
    out.set_item("threshold", profile.threshold_used)?;
    out.set_item("rows", profile.rows)?;
    Ok(out)
}

fn config_from(config: Option<&str>, desk_scale: bool) -> PyResult<ExperimentConfig> {
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_toml_str(text).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    if desk_scale {
        cfg.apply_desk_scale();
    }
    Ok(cfg)
}

fn table_to_py<'py>(py: Python<'py>, table: &resbench_core::experiment::ResultsTable) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(table).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Forecasting ensemble. `config` is TOML text; `mode` is "open", "closed"
/// or "both". Returns `{"rows": [...], "aggregates": [...]}`.
#[pyfunction]
#[pyo3(signature = (config=None, desk_scale=false, mode="both"))]
fn run_benchmark<'py>(py: Python<'py>, config: Option<&str>, desk_scale: bool, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config, desk_scale)?;
    let mode = match mode {
        "open" => BenchMode::Open,
        "closed" => BenchMode::Closed,
        "both" => BenchMode::Both,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let table = py.detach(|| run_bench(&cfg, mode)).map_err(to_py)?;
    table_to_py(py, &table)
}

/// Capacity suite over kinds and members; same return shape as `run_benchmark`.
#[pyfunction]
#[pyo3(signature = (config=None, desk_scale=true))]
fn run_ipc_suite<'py>(py: Python<'py>, config: Option<&str>, desk_scale: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config, desk_scale)?;
    let table = py.detach(|| run_ipc(&cfg)).map_err(to_py)?;
    table_to_py(py, &table)
}

/// Module initializer, public so embedding hosts can register it.
#[pymodule]
#[pyo3(name = "resbench")]
pub fn resbench_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_class::<PyEsn>()?;
    m.add_function(wrap_pyfunction!(mackey_glass_series, m)?)?;
    m.add_function(wrap_pyfunction!(legendre, m)?)?;
    m.add_function(wrap_pyfunction!(count_basis, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(valid_prediction_time, m)?)?;
    m.add_function(wrap_pyfunction!(median_mad, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ipc, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_ipc_suite, m)?)?;
    m.add("KINDS", TopologyKind::ALL.iter().map(|k| k.label()).collect::<Vec<_>>())?;
    Ok(())
}
