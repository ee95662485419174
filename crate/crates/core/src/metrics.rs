//! Forecast error measures and robust ensemble statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest Lyapunov exponent of the Mackey-Glass attractor at tau = 17.
pub const MACKEY_GLASS_LAMBDA1: f64 = 0.007;
/// Normalized error above which a closed-loop forecast is no longer valid.
pub const NMSE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionScore {
    pub mse: f64,
    pub nmse_series: Vec<f64>,
    /// Valid prediction time in Lyapunov units (first-crossing rule).
    pub t_vp_lyapunov: f64,
    /// Same, using the largest below-threshold time even after re-entries.
    pub t_vp_set_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStat {
    pub median: f64,
    pub mad: f64,
    pub n_samples: usize,
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "prediction has {} samples, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("empty series"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Per-step squared error normalized by `sigma2`.
pub fn nmse_series(pred: &[f64], truth: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    check_lengths(pred, truth)?;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateRange(format!(
            "ground-truth variance must be positive, got {sigma2}"
        )));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p).powi(2) / sigma2)
        .collect())
}

/// Valid prediction time `lambda1 * t_m` where step `m` (1-based, `t_m = m dt`)
/// is the last step before the normalized error first reaches `threshold`.
/// Returns the full window when it never does.
pub fn valid_prediction_time(nmse: &[f64], lambda1: f64, dt: f64, threshold: f64) -> Result<f64> {
    check_vpt_args(nmse, dt, threshold)?;
    let valid_steps = nmse
        .iter()
        .position(|&e| !(e < threshold))
        .unwrap_or(nmse.len());
    Ok(lambda1 * dt * valid_steps as f64)
}

/// Literal set-maximum variant: the latest step whose error is below the
/// threshold, regardless of earlier crossings. Zero if no step qualifies.
pub fn valid_prediction_time_set_max(
    nmse: &[f64],
    lambda1: f64,
    dt: f64,
    threshold: f64,
) -> Result<f64> {
    check_vpt_args(nmse, dt, threshold)?;
    let last = nmse.iter().rposition(|&e| e < threshold).map_or(0, |i| i + 1);
    Ok(lambda1 * dt * last as f64)
}

fn check_vpt_args(nmse: &[f64], dt: f64, threshold: f64) -> Result<()> {
    if nmse.is_empty() {
        return Err(Error::contract("empty error series"));
    }
    if !(threshold > 0.0 && dt > 0.0) {
        return Err(Error::param("threshold and dt must be positive"));
    }
    Ok(())
}

/// Median (midpoint rule for even counts) of a sample.
pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("median of an empty sample"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            a + (b - a) / 2.0
        }
    })
}

/// Median and median absolute deviation.
pub fn median_mad(samples: &[f64]) -> Result<EnsembleStat> {
    let m = median(samples)?;
    // equal values (including matching infinities) deviate by exactly zero
    let dev: Vec<f64> = samples
        .iter()
        .map(|&x| if x == m { 0.0 } else { (x - m).abs() })
        .collect();
    Ok(EnsembleStat {
        median: m,
        mad: median(&dev)?,
        n_samples: samples.len(),
    })
}

/// Open-loop or closed-loop score over a window.
pub fn score(
    pred: &[f64],
    truth: &[f64],
    mse_window: usize,
    lambda1: f64,
    dt: f64,
    threshold: f64,
) -> Result<PredictionScore> {
    check_lengths(pred, truth)?;
    let m = mse_window.clamp(1, pred.len());
    let nmse = nmse_series(pred, truth, variance(truth))?;
    Ok(PredictionScore {
        mse: mse(&pred[..m], &truth[..m])?,
        t_vp_lyapunov: valid_prediction_time(&nmse, lambda1, dt, threshold)?,
        t_vp_set_max: valid_prediction_time_set_max(&nmse, lambda1, dt, threshold)?,
        nmse_series: nmse,
    })
}
