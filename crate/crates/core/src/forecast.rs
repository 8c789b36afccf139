//! One-step and autoregressive multi-step forecasting with accumulated
//! predictive uncertainty.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::HierCvae;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    /// `z0 = μ`.
    Mean,
    /// `z0 = μ + σ∘eps` with eps drawn from a stream keyed by the seed, the
    /// origin and the horizon step.
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMeta {
    /// Table row of the forecast origin.
    pub origin: usize,
    pub seed: Option<u64>,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub horizon: usize,
    /// `K × d`, denormalized.
    pub means: Vec<Vec<f64>>,
    /// `K × d`, accumulated and denormalized.
    pub sigmas: Vec<Vec<f64>>,
    /// `K × d`, accumulated, in normalized units.
    pub sigmas_normalized: Vec<Vec<f64>>,
    /// `K × d`, raw uncertainty-head outputs in normalized units.
    pub per_step_unc: Vec<Vec<f64>>,
    /// Normalized rows: the original history, the origin row, then every row
    /// fed back. The window at step `k` is `trajectory[k..k + n]` with
    /// current row `trajectory[k + n]`.
    pub trajectory: Vec<Vec<f64>>,
    pub meta: ForecastMeta,
}

/// Inputs shared by every rollout of one model.
#[derive(Debug, Clone)]
pub struct ForecastContext<'a> {
    pub model: &'a HierCvae,
    pub normalizer: &'a Normalizer,
    /// Columns predicted and fed back; the rest are covariates.
    pub targets: Range<usize>,
}

/// `sqrt(prev² + step²)` per dimension.
pub fn accumulate_sigma(prev: &[f64], step: &[f64]) -> Vec<f64> {
    prev.iter().zip(step).map(|(a, b)| libm::sqrt(a * a + b * b)).collect()
}

impl ForecastContext<'_> {
    fn eps(&self, mode: LatentMode, origin: usize, k: usize) -> Option<Vec<f64>> {
        match mode {
            LatentMode::Mean => None,
            LatentMode::Sampled { seed } => {
                Some(rng::normals(seed, rng::TAG_EVAL_EPS, origin as u64, k as u64, self.model.latent_dim()))
            }
        }
    }

    fn denormalize(&self, mean: &[f64], sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.normalizer.inverse_row(mean);
        let s = sigma.iter().zip(&self.normalizer.std).map(|(s, sd)| s * sd).collect();
        (m, s)
    }

    /// Next-step `(x̂, σ)` in data units for a normalized window.
    pub fn forecast_one(&self, history: &Tensor, current: &[f64], origin: usize, mode: LatentMode) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps = self.eps(mode, origin, 0);
        let pred = self.model.predict(history, current, eps.as_deref())?;
        Ok(self.denormalize(&pred.x_hat, &pred.sigma))
    }

    /// Rolls the model forward `k` steps from a normalized window.
    /// `future_covariates`, when given, holds the true normalized rows
    /// `t+1..` whose non-target columns replace the predicted ones.
    pub fn forecast_multi(
        &self,
        history: &Tensor,
        current: &[f64],
        origin: usize,
        k: usize,
        mode: LatentMode,
        future_covariates: Option<&[Vec<f64>]>,
    ) -> Result<ForecastResult> {
        if k < 1 {
            return Err(Error::Contract(format!("forecast horizon must be at least 1, got {k}")));
        }
        let (n, d) = (history.rows(), history.cols());
        let mut trajectory: Vec<Vec<f64>> = (0..n).map(|r| history.row(r).to_vec()).collect();
        trajectory.push(current.to_vec());
        let mut means = Vec::with_capacity(k);
        let mut sig_norm: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut unc = Vec::with_capacity(k);
        for step in 0..k {
            let flat: Vec<f64> = trajectory[step..step + n].iter().flatten().copied().collect();
            let hist = Tensor::matrix(n, d, flat)?;
            let eps = self.eps(mode, origin, step);
            let pred = self.model.predict(&hist, &trajectory[step + n], eps.as_deref())?;
            let acc = match sig_norm.last() {
                Some(prev) => accumulate_sigma(prev, &pred.sigma),
                None => pred.sigma.clone(),
            };
            let mut fed = pred.x_hat.clone();
            if let Some(future) = future_covariates.and_then(|f| f.get(step)) {
                for (c, v) in fed.iter_mut().enumerate() {
                    if !self.targets.contains(&c) {
                        *v = future[c];
                    }
                }
            }
            means.push(pred.x_hat);
            unc.push(pred.sigma);
            sig_norm.push(acc);
            trajectory.push(fed);
        }
        let mut out_means = Vec::with_capacity(k);
        let mut out_sigmas = Vec::with_capacity(k);
        for (m, s) in means.iter().zip(&sig_norm) {
            let (dm, ds) = self.denormalize(m, s);
            out_means.push(dm);
            out_sigmas.push(ds);
        }
        let seed = match mode {
            LatentMode::Mean => None,
            LatentMode::Sampled { seed } => Some(seed),
        };
        Ok(ForecastResult {
            horizon: k,
            means: out_means,
            sigmas: out_sigmas,
            sigmas_normalized: sig_norm,
            per_step_unc: unc,
            trajectory,
            meta: ForecastMeta { origin, seed, model_hash: self.model.fingerprint() },
        })
    }
}
