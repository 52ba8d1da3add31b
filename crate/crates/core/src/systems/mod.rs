//! Benchmark systems, their samplers and exact oracles, and evaluation metrics.

mod langevin;
mod linear;
mod logistic;

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use langevin::{Langevin, LangevinOracle};
pub use linear::LinearSystem;
pub use logistic::{logistic, LogisticMap, LogisticOracle};

use crate::error::{Error, Result};
use crate::ndcore::{svd, Matrix};
use crate::scores::Covariances;

/// Paired samples `(x_i, x'_i)`, stored as `d×n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    /// Per-pair lag time when it varies between pairs.
    pub lag: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, lag: Option<Vec<f64>>) -> Dataset {
        debug_assert_eq!(x.shape(), y.shape());
        Dataset { x, y, lag }
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Columns `idx` of both sides.
    pub fn select(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (self.x.select_columns(idx), self.y.select_columns(idx))
    }

    fn header(&self) -> Vec<String> {
        let d = self.dim();
        let mut h = Vec::with_capacity(2 * d + 1);
        if d == 1 {
            h.push("x".to_string());
            h.push("x_next".to_string());
        } else {
            h.extend((0..d).map(|i| format!("x{i}")));
            h.extend((0..d).map(|i| format!("x_next{i}")));
        }
        if self.lag.is_some() {
            h.push("lag".to_string());
        }
        h
    }

    /// Writes `x[, …], x_next[, …][, lag]` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(self.header()).map_err(csv_error)?;
        let d = self.dim();
        for j in 0..self.len() {
            let mut row: Vec<String> = Vec::with_capacity(2 * d + 1);
            row.extend(self.x.column(j).iter().map(|v| v.to_string()));
            row.extend(self.y.column(j).iter().map(|v| v.to_string()));
            if let Some(l) = &self.lag {
                row.push(l[j].to_string());
            }
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
        let headers = r.headers().map_err(csv_error)?.clone();
        let has_lag = headers.iter().next_back() == Some("lag");
        let cols = headers.len() - usize::from(has_lag);
        if cols == 0 || cols % 2 != 0 {
            return Err(Error::Format(format!("{}: expected paired state columns", path.display())));
        }
        let d = cols / 2;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut lags = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), line + 2)))?;
            if vals.len() != headers.len() {
                return Err(Error::Format(format!("{} line {}: wrong field count", path.display(), line + 2)));
            }
            xs.extend_from_slice(&vals[..d]);
            ys.extend_from_slice(&vals[d..2 * d]);
            if has_lag {
                lags.push(vals[2 * d]);
            }
        }
        let n = xs.len() / d;
        let x = Matrix::from_column_slice(d, n, &xs);
        let y = Matrix::from_column_slice(d, n, &ys);
        crate::ndcore::ensure_finite(&x, "dataset")?;
        crate::ndcore::ensure_finite(&y, "dataset")?;
        Ok(Dataset::new(x, y, has_lag.then_some(lags)))
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Serializable system description used by configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    Logistic(LogisticMap),
    Langevin(Langevin),
    Linear(LinearSystem),
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::Logistic(s) => s.validate(),
            SystemSpec::Langevin(s) => {
                s.validate()?;
                s.check_stable()
            }
            SystemSpec::Linear(s) => s.validate(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::Linear(s) => s.dim(),
            _ => 1,
        }
    }

    pub fn sample_trajectory(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            SystemSpec::Logistic(s) => s.sample_trajectory(n, seed),
            SystemSpec::Langevin(s) => s.sample_trajectory(n, seed),
            SystemSpec::Linear(s) => s.sample_trajectory(n, seed),
        }
    }

    /// Time between `x` and `x'` for fixed-lag data.
    pub fn lag_time(&self) -> f64 {
        match self {
            SystemSpec::Langevin(s) => s.lag_steps as f64 * s.dt,
            _ => 1.0,
        }
    }
}

/// `max_{i≤k} min_j |λ̂_i − λ_j|` over the first `k` estimated eigenvalues.
pub fn spectral_error(estimated: &[Complex64], oracle: &[Complex64], k: usize) -> f64 {
    estimated
        .iter()
        .take(k)
        .map(|e| oracle.iter().map(|o| (e - o).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// `Σ_{i≤r} σ_i² − score`.
pub fn optimality_gap(score: f64, singular_values: &[f64], r: usize) -> f64 {
    singular_values.iter().take(r).map(|s| s * s).sum::<f64>() - score
}

/// Projection score restricted to the best rank-`r` part of the whitened
/// cross-covariance: `Σ_{i≤r} s_i²` with `s` the singular values of
/// `C_X^{†/2} C_XY C_Y^{†/2}`.
pub fn truncated_projection_score(cov: &Covariances, r: usize, rtol: f64) -> Result<f64> {
    let a = crate::ndcore::pinv_sqrt(&cov.cx, rtol)?;
    let b = crate::ndcore::pinv_sqrt(&cov.cy, rtol)?;
    let s = svd(&(a * &cov.cxy * b))?;
    Ok(s.singular_values.iter().take(r).map(|v| v * v).sum())
}

/// Two-sample Kolmogorov–Smirnov statistic (sorts its inputs).
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}
