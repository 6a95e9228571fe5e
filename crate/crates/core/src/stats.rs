//! Batch statistics, running (EMA) statistics, and the divergence-from-mean
//! abnormality criteria.
//!
//! The running mean acts as a statistical reference for normality: snippets
//! whose features diverge from it are candidate anomalies. Divergence is
//! measured per snippet against the running mean under a diagonal covariance
//! (Mahalanobis), or with the Euclidean / cosine / plain feature-magnitude
//! variants used for ablation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite3, ensure_same_len};

/// Per-channel mean and population variance of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// EMA-maintained per-channel statistics plus the update momentum and the
/// variance floor used in Mahalanobis denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        RunningStats {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Which divergence is computed between a feature vector and the running mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfmMetric {
    Mahalanobis,
    Euclidean,
    Cosine,
    FeatureMagnitude,
}

impl std::str::FromStr for DfmMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(DfmMetric::Mahalanobis),
            "euclidean" => Ok(DfmMetric::Euclidean),
            "cosine" => Ok(DfmMetric::Cosine),
            "fm" | "feature_magnitude" => Ok(DfmMetric::FeatureMagnitude),
            other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for DfmMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DfmMetric::Mahalanobis => "mahalanobis",
            DfmMetric::Euclidean => "euclidean",
            DfmMetric::Cosine => "cosine",
            DfmMetric::FeatureMagnitude => "feature_magnitude",
        };
        f.write_str(s)
    }
}

/// Per-channel mean and population variance over all `B*T` snippets.
///
/// Two-pass computation in double precision.
pub fn batch_stats(x: ArrayView3<'_, f64>) -> Result<BatchStats> {
    let (b, t, c) = x.dim();
    let n = b * t;
    if n == 0 || c == 0 {
        return Err(Error::EmptyBatch);
    }
    ensure_finite3(x)?;

    let mut mean = Array1::<f64>::zeros(c);
    for video in x.axis_iter(Axis(0)) {
        for snippet in video.axis_iter(Axis(0)) {
            mean += &snippet;
        }
    }
    mean /= n as f64;

    let mut var = Array1::<f64>::zeros(c);
    for video in x.axis_iter(Axis(0)) {
        for snippet in video.axis_iter(Axis(0)) {
            for (k, &v) in snippet.iter().enumerate() {
                let d = v - mean[k];
                var[k] += d * d;
            }
        }
    }
    var /= n as f64;

    Ok(BatchStats { mean, var })
}

/// EMA update: `rs <- (1 - momentum) * rs + momentum * batch`.
pub fn ema_update(rs: &mut RunningStats, bs: &BatchStats) -> Result<()> {
    ensure_same_len(rs.mean.len(), bs.mean.len())?;
    ensure_same_len(rs.var.len(), bs.var.len())?;
    let a = rs.momentum;
    rs.mean.zip_mut_with(&bs.mean, |r, &b| *r = (1.0 - a) * *r + a * b);
    rs.var.zip_mut_with(&bs.var, |r, &b| *r = (1.0 - a) * *r + a * b);
    Ok(())
}

/// Divergence of one feature vector from the running mean.
pub fn dfm(x: ArrayView1<'_, f64>, rs: &RunningStats, metric: DfmMetric) -> Result<f64> {
    ensure_same_len(rs.channels(), x.len())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteFeature);
    }
    match metric {
        DfmMetric::Mahalanobis => {
            let mut acc = 0.0;
            for ((&xi, &mu), &v) in x.iter().zip(rs.mean.iter()).zip(rs.var.iter()) {
                let denom = v + rs.eps;
                if denom <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "non-positive variance in Mahalanobis denominator".into(),
                    ));
                }
                let d = xi - mu;
                acc += d * d / denom;
            }
            Ok(acc.sqrt())
        }
        DfmMetric::Euclidean => {
            let acc: f64 = x
                .iter()
                .zip(rs.mean.iter())
                .map(|(&xi, &mu)| (xi - mu) * (xi - mu))
                .sum();
            Ok(acc.sqrt())
        }
        DfmMetric::Cosine => {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nm = rs.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || nm == 0.0 {
                return Err(Error::UndefinedCosine);
            }
            let dot: f64 = x.iter().zip(rs.mean.iter()).map(|(&a, &b)| a * b).sum();
            Ok(1.0 - dot / (nx * nm))
        }
        DfmMetric::FeatureMagnitude => {
            Ok(x.iter().map(|v| v * v).sum::<f64>().sqrt())
        }
    }
}

/// Divergence and its gradient with respect to `x`. Running statistics are
/// constants: no gradient flows into the mean or variance.
///
/// At the (measure-zero) singular points of each metric the zero subgradient
/// is returned.
pub fn dfm_grad(
    x: ArrayView1<'_, f64>,
    rs: &RunningStats,
    metric: DfmMetric,
) -> Result<(f64, Array1<f64>)> {
    let value = dfm(x, rs, metric)?;
    let c = x.len();
    let grad = match metric {
        DfmMetric::Mahalanobis => {
            if value == 0.0 {
                Array1::zeros(c)
            } else {
                let mut g = Array1::zeros(c);
                for k in 0..c {
                    g[k] = (x[k] - rs.mean[k]) / (rs.var[k] + rs.eps) / value;
                }
                g
            }
        }
        DfmMetric::Euclidean => {
            if value == 0.0 {
                Array1::zeros(c)
            } else {
                let mut g = Array1::zeros(c);
                for k in 0..c {
                    g[k] = (x[k] - rs.mean[k]) / value;
                }
                g
            }
        }
        DfmMetric::Cosine => {
            // d(1 - cos)/dx = cos * x / |x|^2 - mu / (|x| |mu|)
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nm = rs.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = 1.0 - value;
            let mut g = Array1::zeros(c);
            for k in 0..c {
                g[k] = cos * x[k] / (nx * nx) - rs.mean[k] / (nx * nm);
            }
            g
        }
        DfmMetric::FeatureMagnitude => {
            if value == 0.0 {
                Array1::zeros(c)
            } else {
                x.mapv(|v| v / value)
            }
        }
    };
    Ok((value, grad))
}

/// Elementwise divergence over a `[B, T, C]` tensor, yielding a `[B, T]` grid.
pub fn dfm_batch(
    x: ArrayView3<'_, f64>,
    rs: &RunningStats,
    metric: DfmMetric,
) -> Result<Array2<f64>> {
    let (b, t, _c) = x.dim();
    let mut grid = Array2::<f64>::zeros((b, t));
    for bi in 0..b {
        for ti in 0..t {
            grid[[bi, ti]] = dfm(x.slice(ndarray::s![bi, ti, ..]), rs, metric)?;
        }
    }
    Ok(grid)
}
