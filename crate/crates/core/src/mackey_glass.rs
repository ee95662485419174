//! Mackey-Glass delay differential equation
//!
//! ```text
//! du/dt = a u(t - tau) / (1 + u(t - tau)^q) - b u(t)
//! ```
//!
//! integrated with the implicit trapezoidal rule on a fine grid whose step
//! divides the delay exactly, then sampled at a coarser spacing by linear
//! interpolation between bracketing grid points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BLOWUP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MackeyGlassParams {
    pub a: f64,
    pub b: f64,
    pub q: i32,
    pub tau: f64,
    /// Integration step.
    pub dt: f64,
    /// Fine-grid steps discarded before sampling starts.
    pub transient_steps: usize,
    /// Spacing of the returned samples.
    pub target_step: f64,
    /// Range of the uniform random initial history.
    pub history_range: (f64, f64),
}

impl Default for MackeyGlassParams {
    fn default() -> Self {
        Self {
            a: 0.2,
            b: 0.1,
            q: 10,
            tau: 17.0,
            dt: 1.7e-2,
            transient_steps: 250_000,
            target_step: 1.0,
            history_range: (0.1, 1.3),
        }
    }
}

impl MackeyGlassParams {
    /// Number of fine-grid steps spanned by the delay, `tau / dt`.
    pub fn delay_slots(&self) -> Result<usize> {
        if !(self.a > 0.0 && self.b > 0.0 && self.dt > 0.0 && self.tau > 0.0) {
            return Err(Error::param("a, b, dt and tau must all be positive"));
        }
        if !(self.target_step > 0.0) {
            return Err(Error::param("target_step must be positive"));
        }
        let ratio = self.tau / self.dt;
        let slots = ratio.round();
        if slots < 1.0 || (ratio - slots).abs() > 1e-6 * slots {
            return Err(Error::param(format!(
                "tau / dt = {ratio} must be a positive integer"
            )));
        }
        Ok(slots as usize)
    }

    #[inline]
    fn nonlinearity(&self, u: f64) -> f64 {
        u / (1.0 + u.powi(self.q))
    }
}

/// Equidistant scalar samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub step: f64,
    pub origin: f64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, step: f64) -> Self {
        Self {
            values,
            step,
            origin: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    /// Writes one value per line after a `# mackey_glass key=value ...` header.
    pub fn write_text(&self, path: &Path, header: &BTreeMap<String, String>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut line = String::from("# mackey_glass");
        for (k, v) in header {
            line.push_str(&format!(" {k}={v}"));
        }
        line.push_str(&format!(" step={} origin={}", self.step, self.origin));
        let res = (|| -> std::io::Result<()> {
            writeln!(out, "{line}")?;
            for v in &self.values {
                writeln!(out, "{v:.17e}")?;
            }
            out.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    /// Reads a file produced by [`TimeSeries::write_text`], returning the
    /// series and the header fields.
    pub fn read_text(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .and_then(|l| l.strip_prefix("# mackey_glass"))
            .ok_or_else(|| Error::format(path, "missing `# mackey_glass` header"))?;
        let header: BTreeMap<String, String> = header_line
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let num = |key: &str, default: f64| -> Result<f64> {
            header.get(key).map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| Error::format(path, format!("bad header value {key}={v}")))
            })
        };
        let step = num("step", 1.0)?;
        let origin = num("origin", 0.0)?;
        let values = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("line {}: not a number", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                values,
                step,
                origin,
            },
            header,
        ))
    }
}

/// Affine map `x -> 2 (x - min) / (max - min) - 1` recorded by [`rescale`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub min: f64,
    pub max: f64,
}

impl AffineMap {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    #[inline]
    pub fn invert(&self, y: f64) -> f64 {
        (y + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}

/// Integrates from a uniform random initial history.
pub fn generate(
    params: &MackeyGlassParams,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<TimeSeries> {
    let (lo, hi) = params.history_range;
    if !(lo <= hi) {
        return Err(Error::param("history_range must satisfy lo <= hi"));
    }
    generate_with_history(params, n_samples, |_| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    })
}

/// Integrates from an explicit history, `history(t)` for `t` in `[-tau, 0]`
/// on the fine grid (called in increasing time order).
pub fn generate_with_history(
    params: &MackeyGlassParams,
    n_samples: usize,
    mut history: impl FnMut(f64) -> f64,
) -> Result<TimeSeries> {
    if n_samples == 0 {
        return Err(Error::param("n_samples must be at least 1"));
    }
    let slots = params.delay_slots()?;
    let dt = params.dt;
    // ring buffer holding u_{n-slots} ..= u_n
    let len = slots + 1;
    let mut buf: Vec<f64> = (0..len)
        .map(|i| history(-(params.tau) + i as f64 * dt))
        .collect();
    let mut head = slots; // index of u_n
    let lead = 2.0 - params.b * dt;
    let denom = 2.0 + params.b * dt;
    let gain = params.a * dt;

    let mut global_step = 0usize;
    let mut advance = |buf: &mut [f64], head: &mut usize| -> Result<f64> {
        let u_n = buf[*head];
        // u_{n-slots} sits right after head; u_{n+1-slots} after that
        let oldest = (*head + 1) % len;
        let next_oldest = (*head + 2) % len;
        let lag0 = params.nonlinearity(buf[oldest]);
        let lag1 = params.nonlinearity(buf[next_oldest]);
        let u_next = (lead * u_n + gain * (lag0 + lag1)) / denom;
        global_step += 1;
        if !u_next.is_finite() || u_next.abs() > BLOWUP {
            return Err(Error::Divergence {
                step: global_step,
                detail: format!("|u| = {} exceeds {BLOWUP:e}", u_next.abs()),
            });
        }
        *head = oldest;
        buf[oldest] = u_next;
        Ok(u_next)
    };
    for _ in 0..params.transient_steps {
        advance(&mut buf, &mut head)?;
    }

    let ratio = params.target_step / dt;
    let mut values = Vec::with_capacity(n_samples);
    let mut prev = buf[head];
    let mut cur = prev;
    let mut fine = 0usize; // index of `cur` relative to the end of the transient
    while values.len() < n_samples {
        let x = values.len() as f64 * ratio;
        if x <= fine as f64 {
            let v = if fine == 0 || x == fine as f64 {
                cur
            } else {
                let frac = x - (fine - 1) as f64;
                prev + frac * (cur - prev)
            };
            values.push(v);
        } else {
            prev = cur;
            cur = advance(&mut buf, &mut head)?;
            fine += 1;
        }
    }

    Ok(TimeSeries {
        values,
        step: params.target_step,
        origin: params.transient_steps as f64 * dt,
    })
}

/// Maps the series affinely onto `[-1, 1]` using its own min and max.
pub fn rescale(ts: &TimeSeries) -> Result<(TimeSeries, AffineMap)> {
    let (min, max) = ts
        .min_max()
        .ok_or_else(|| Error::DegenerateRange("empty series".into()))?;
    if !(max > min) {
        return Err(Error::DegenerateRange(format!(
            "constant series (value {min})"
        )));
    }
    let map = AffineMap { min, max };
    Ok((
        TimeSeries {
            values: ts.values.iter().map(|&v| map.apply(v)).collect(),
            step: ts.step,
            origin: ts.origin,
        },
        map,
    ))
}
