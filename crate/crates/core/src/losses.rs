//! Loss terms on the graph and the weighted total objective.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::attention::ENTROPY_FLOOR;
use crate::autodiff::{Graph, Var};
use crate::config::AttnRegSign;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tolerance on row sums accepted by [`attn_entropy`].
pub const ROW_SUM_TOL: f64 = 1e-4;

/// `½ Σ (ln 2π + log σ² + (x − μ)² / σ²)`.
pub fn gaussian_nll(g: &mut Graph, x: Var, mu: Var, log_var: Var) -> Result<Var> {
    let diff = g.sub(x, mu)?;
    let sq = g.mul(diff, diff)?;
    let neg_lv = g.neg(log_var)?;
    let prec = g.exp(neg_lv)?;
    let quad = g.mul(sq, prec)?;
    let inner = g.add(quad, log_var)?;
    let s = g.sum(inner)?;
    let width = g.value(x).numel() as f64;
    g.affine_const(s, 0.5, 0.5 * width * LN_2PI)
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, log_var)?;
    let s = g.sum(b)?;
    let width = g.value(mu).numel() as f64;
    g.affine_const(s, 0.5, -0.5 * width)
}

/// `‖x − x̂‖²`.
pub fn squared_error(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let diff = g.sub(x, x_hat)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// `Σ [err² / (2σ²) + ½ log σ²]`.
pub fn robust_loss(g: &mut Graph, x: Var, x_hat: Var, sigma: Var) -> Result<Var> {
    if let Some(bad) = g.value(sigma).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Contract(format!("robust loss needs positive sigma, got {bad}")));
    }
    let diff = g.sub(x, x_hat)?;
    let sq = g.mul(diff, diff)?;
    let var = g.mul(sigma, sigma)?;
    let ratio = g.div(sq, var)?;
    let log_var = g.log(var)?;
    let inner = g.add(ratio, log_var)?;
    let s = g.sum(inner)?;
    g.scale(s, 0.5)
}

/// Mean row entropy over a set of stochastic matrices, with `0·log 0 := 0`.
/// Each matrix counts equally.
pub fn attn_entropy(maps: &[Tensor]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::contract("no attention maps"));
    }
    let mut total = 0.0;
    for (k, map) in maps.iter().enumerate() {
        let cols = map.cols();
        let mut acc = 0.0;
        for r in 0..map.rows() {
            let row = &map.data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Contract(format!("map {k} row {r} is not a distribution (sum {sum})")));
            }
            acc += row.iter().map(|&p| -p * libm::log(p.clamp(ENTROPY_FLOOR, 1.0))).sum::<f64>();
        }
        total += acc / map.rows() as f64;
    }
    Ok(total / maps.len() as f64)
}

/// Per-term scalars and the weights they were combined with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub pred_mse: f64,
    pub robust: f64,
    pub smooth: f64,
    /// Absent when attention is disabled.
    pub attn_entropy: Option<f64>,
    pub total: f64,
    pub beta: f64,
    pub lambda_pred: f64,
    pub lambda_robust: f64,
    pub lambda_smooth: f64,
    pub lambda_attn: f64,
    pub attn_sign: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the reported components.
    pub fn recombined(&self) -> f64 {
        self.recon_nll + self.beta * self.kl
            + self.lambda_pred * self.pred_mse
            + self.lambda_robust * self.robust
            + self.lambda_smooth * self.smooth
            + self.attn_sign * self.lambda_attn * self.attn_entropy.unwrap_or(0.0)
    }
}

/// Graph handles of the component terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub recon_nll: Var,
    pub kl: Var,
    pub pred_mse: Var,
    pub robust: Var,
    pub smooth: Var,
    pub attn_entropy: Option<Var>,
}

pub fn attn_sign(sign: AttnRegSign) -> f64 {
    match sign {
        AttnRegSign::Diversity => -1.0,
        AttnRegSign::Literal => 1.0,
    }
}

/// `nll + β·kl + λ_p·pred + λ_r·robust + λ_s·smooth ∓ λ_a·H`.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    lambdas: [Var; 4],
    beta: f64,
    sign: AttnRegSign,
) -> Result<(Var, LossBreakdown)> {
    let named: [(&str, Option<Var>); 6] = [
        ("recon_nll", Some(terms.recon_nll)),
        ("kl", Some(terms.kl)),
        ("pred_mse", Some(terms.pred_mse)),
        ("robust", Some(terms.robust)),
        ("smooth", Some(terms.smooth)),
        ("attn_entropy", terms.attn_entropy),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            let x = g.item(v);
            if !x.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is {x}")));
            }
        }
    }
    let sgn = attn_sign(sign);
    let kl = g.scale(terms.kl, beta)?;
    let mut total = g.add(terms.recon_nll, kl)?;
    for (lambda, term) in lambdas.iter().zip([terms.pred_mse, terms.robust, terms.smooth]) {
        let w = g.mul(*lambda, term)?;
        total = g.add(total, w)?;
    }
    if let Some(h) = terms.attn_entropy {
        let w = g.mul(lambdas[3], h)?;
        let w = g.scale(w, sgn)?;
        total = g.add(total, w)?;
    }
    let breakdown = LossBreakdown {
        recon_nll: g.item(terms.recon_nll),
        kl: g.item(terms.kl),
        pred_mse: g.item(terms.pred_mse),
        robust: g.item(terms.robust),
        smooth: g.item(terms.smooth),
        attn_entropy: terms.attn_entropy.map(|h| g.item(h)),
        total: g.item(total),
        beta,
        lambda_pred: g.item(lambdas[0]),
        lambda_robust: g.item(lambdas[1]),
        lambda_smooth: g.item(lambdas[2]),
        lambda_attn: g.item(lambdas[3]),
        attn_sign: sgn,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(String::from("total loss is not finite")));
    }
    Ok((total, breakdown))
}
