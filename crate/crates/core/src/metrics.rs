//! Point accuracy, distributional similarity and calibration metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normal_quantile, Moments};

/// `|y|` at or below this is excluded from MAPE.
pub const MAPE_ZERO: f64 = 1e-8;
pub const R2_FLAT: f64 = 1e-12;
pub const PICP_Z: f64 = 1.96;
pub const W1_GRID: usize = 1000;
pub const ECE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    pub mape_pct: f64,
    pub smape_pct: f64,
    /// `−∞` when the truth is flat and the fit is not exact.
    pub r2: f64,
    pub skipped_mape_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub wasserstein: f64,
    pub ks: f64,
    pub skew_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub ece: f64,
    pub picp95: f64,
}

fn check_pair(op: &str, a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::Contract(format!("{op}: lengths {a} and {b} must be equal and nonzero")));
    }
    Ok(())
}

pub fn point_metrics(y: &[f64], y_hat: &[f64]) -> Result<PointMetrics> {
    check_pair("point_metrics", y.len(), y_hat.len())?;
    let n = y.len() as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut ape = 0.0;
    let mut used = 0usize;
    let mut sape = 0.0;
    for (&a, &b) in y.iter().zip(y_hat) {
        let e = a - b;
        sse += e * e;
        sae += e.abs();
        if a.abs() > MAPE_ZERO {
            ape += (e / a).abs();
            used += 1;
        }
        let denom = (a.abs() + b.abs()) / 2.0;
        if denom > 0.0 {
            sape += e.abs() / denom;
        }
    }
    let mean = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r2 = if sst < R2_FLAT {
        if sse < R2_FLAT {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    };
    Ok(PointMetrics {
        mse: sse / n,
        mae: sae / n,
        mape_pct: if used > 0 { 100.0 * ape / used as f64 } else { 0.0 },
        smape_pct: 100.0 * sape / n,
        r2,
        skipped_mape_points: y.len() - used,
    })
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Left-continuous inverse of the empirical CDF.
fn ecdf_quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let idx = libm::ceil(u * n as f64) as usize;
    sorted[idx.clamp(1, n) - 1]
}

/// 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::contract("wasserstein: empty sample"));
    }
    let (a, b) = (sorted(y), sorted(y_hat));
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64);
    }
    let total: f64 = (0..W1_GRID)
        .map(|i| {
            let u = (i as f64 + 0.5) / W1_GRID as f64;
            (ecdf_quantile(&a, u) - ecdf_quantile(&b, u)).abs()
        })
        .sum();
    Ok(total / W1_GRID as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic over the pooled support.
pub fn ks_statistic(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::contract("ks: empty sample"));
    }
    let (a, b) = (sorted(y), sorted(y_hat));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&z)) => x.min(z),
            (Some(&x), None) => x,
            (None, Some(&z)) => z,
            (None, None) => break,
        };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

pub fn distribution_metrics(y: &[f64], y_hat: &[f64]) -> Result<DistributionMetrics> {
    let wasserstein = wasserstein(y, y_hat)?;
    let ks = ks_statistic(y, y_hat)?;
    let skew_diff = (Moments::of_slice(y).skew - Moments::of_slice(y_hat).skew).abs();
    Ok(DistributionMetrics { wasserstein, ks, skew_diff })
}

/// Fraction of `y` inside the central Gaussian interval of mass `level`.
pub fn coverage(y: &[f64], means: &[f64], sigmas: &[f64], level: f64) -> f64 {
    let z = normal_quantile(0.5 + level / 2.0);
    coverage_at_z(y, means, sigmas, z)
}

fn coverage_at_z(y: &[f64], means: &[f64], sigmas: &[f64], z: f64) -> f64 {
    let inside = y
        .iter()
        .zip(means.iter().zip(sigmas))
        .filter(|(v, (m, s))| (*v - *m).abs() <= z * *s)
        .count();
    inside as f64 / y.len() as f64
}

pub fn calibration_metrics_at(y: &[f64], means: &[f64], sigmas: &[f64], levels: &[f64]) -> Result<CalibrationMetrics> {
    check_pair("calibration_metrics", y.len(), means.len())?;
    check_pair("calibration_metrics", y.len(), sigmas.len())?;
    if let Some(s) = sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Contract(format!("calibration_metrics: nonpositive sigma {s}")));
    }
    if levels.is_empty() {
        return Err(Error::contract("calibration_metrics: no levels"));
    }
    let ece = levels.iter().map(|&p| (coverage(y, means, sigmas, p) - p).abs()).sum::<f64>() / levels.len() as f64;
    Ok(CalibrationMetrics { ece, picp95: coverage_at_z(y, means, sigmas, PICP_Z) })
}

pub fn calibration_metrics(y: &[f64], means: &[f64], sigmas: &[f64]) -> Result<CalibrationMetrics> {
    calibration_metrics_at(y, means, sigmas, &ECE_LEVELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mse: f64,
    pub mae: f64,
    pub mape_pct: f64,
    pub smape_pct: f64,
    pub r2: f64,
    pub wasserstein: f64,
    pub ks: f64,
    pub skew_diff: f64,
    pub ece: f64,
    pub picp95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: String,
    pub split: String,
    pub n_points: usize,
    pub metrics: MetricValues,
    pub skipped_mape_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub timestamp: i64,
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: i64,
    pub value: f64,
}

/// Aggregates all metrics for one target and split. Forecasts and truths must
/// be aligned by timestamp.
pub fn build_report(target: &str, split: &str, forecasts: &[ForecastPoint], truths: &[Observation]) -> Result<MetricsReport> {
    if forecasts.is_empty() {
        return Err(Error::contract("build_report: no forecasts"));
    }
    let mut bad: Vec<String> = forecasts
        .iter()
        .zip(truths)
        .filter(|(f, t)| f.timestamp != t.timestamp)
        .map(|(f, t)| format!("{}≠{}", f.timestamp, t.timestamp))
        .collect();
    let longer = if forecasts.len() > truths.len() {
        forecasts[truths.len()..].iter().map(|f| f.timestamp).collect::<Vec<_>>()
    } else {
        truths[forecasts.len()..].iter().map(|t| t.timestamp).collect()
    };
    bad.extend(longer.iter().map(|t| format!("{t} unmatched")));
    if !bad.is_empty() {
        return Err(Error::Contract(format!("build_report: misaligned timestamps: {}", bad.join(", "))));
    }
    let y: Vec<f64> = truths.iter().map(|t| t.value).collect();
    let means: Vec<f64> = forecasts.iter().map(|f| f.mean).collect();
    let sigmas: Vec<f64> = forecasts.iter().map(|f| f.sigma).collect();
    let p = point_metrics(&y, &means)?;
    let d = distribution_metrics(&y, &means)?;
    let c = calibration_metrics(&y, &means, &sigmas)?;
    Ok(MetricsReport {
        target: target.into(),
        split: split.into(),
        n_points: y.len(),
        metrics: MetricValues {
            mse: p.mse,
            mae: p.mae,
            mape_pct: p.mape_pct,
            smape_pct: p.smape_pct,
            r2: p.r2,
            wasserstein: d.wasserstein,
            ks: d.ks,
            skew_diff: d.skew_diff,
            ece: c.ece,
            picp95: c.picp95,
        },
        skipped_mape_points: p.skipped_mape_points,
    })
}
