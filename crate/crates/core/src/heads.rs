//! Prediction and uncertainty heads, the smoothness gate, the historical
//! importance network and the loss-balancing weights.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::softplus_inverse;
use crate::autodiff::{Graph, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const LAMBDA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Heads {
    pub pred: Mlp,
    pub unc: Mlp,
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let dims = [cfg.latent_dim, cfg.hidden, cfg.input_dim];
        Heads {
            pred: Mlp::new(store, rng, "heads.pred", &dims, Activation::Softplus),
            unc: Mlp::new(store, rng, "heads.unc", &dims, Activation::Softplus),
        }
    }

    pub fn predict(&self, g: &mut Graph, p: &Bound, z_l: Var) -> Result<Var> {
        self.pred.forward(g, p, z_l)
    }

    /// `softplus(f_unc(z)) + 1e-6`, strictly positive.
    pub fn sigma(&self, g: &mut Graph, p: &Bound, z_l: Var) -> Result<Var> {
        let raw = self.unc.forward(g, p, z_l)?;
        let s = g.softplus(raw)?;
        g.add_scalar(s, SIGMA_FLOOR)
    }
}

/// `β_t = sigmoid(x_tᵀ W x_{t−1} + b)`.
#[derive(Debug, Clone)]
pub struct SmoothGate {
    pub w: ParamId,
    pub b: ParamId,
}

fn row(g: &mut Graph, x: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::matrix(1, x.len(), x.to_vec())?))
}

impl SmoothGate {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.input_dim;
        SmoothGate {
            w: store.add_uniform("heads.smooth_gate.weight", &[d, d], d, rng),
            b: store.add("heads.smooth_gate.bias", Tensor::zeros(&[1])),
        }
    }

    pub fn gate(&self, g: &mut Graph, p: &Bound, x_t: &[f64], x_prev: &[f64]) -> Result<Var> {
        let a = row(g, x_t)?;
        let bt = g.constant(Tensor::matrix(x_prev.len(), 1, x_prev.to_vec())?);
        let aw = g.matmul(a, p.var(self.w))?;
        let s = g.matmul(aw, bt)?;
        let s = g.add(s, p.var(self.b))?;
        g.sigmoid(s)
    }

    /// `Σ_{t≥2} β_t ‖z_t − z_{t−1}‖²` over a time-ordered sequence. Fewer
    /// than two steps give 0.
    pub fn loss(&self, g: &mut Graph, p: &Bound, z: &[Var], x: &[&[f64]]) -> Result<Var> {
        if z.len() != x.len() {
            return Err(Error::dim("smooth_loss", alloc::format!("{} latents vs {} inputs", z.len(), x.len())));
        }
        let mut total = g.scalar(0.0);
        for t in 1..z.len() {
            let diff = g.sub(z[t], z[t - 1])?;
            let sq = g.mul(diff, diff)?;
            let dist = g.sum(sq)?;
            let beta = self.gate(g, p, x[t], x[t - 1])?;
            let term = g.mul(dist, beta)?;
            let term = g.sum(term)?;
            total = g.add(total, term)?;
        }
        Ok(total)
    }
}

/// Softmax importance weights over history rows from `f_imp([x_t; x_{t−i}])`,
/// used to pool projected history features.
#[derive(Debug, Clone)]
pub struct AdaptiveHistory {
    pub importance: Mlp,
    pub hist_proj: Linear,
}

impl AdaptiveHistory {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.input_dim;
        AdaptiveHistory {
            importance: Mlp::new(store, rng, "adaptive.importance", &[2 * d, cfg.hidden, 1], Activation::Tanh),
            hist_proj: Linear::new(store, rng, "adaptive.hist_proj", d, cfg.d_model),
        }
    }

    /// Pairs each history row with `x_t`: `n × 2d`.
    pub fn pairs(x_t: &[f64], history: &Tensor) -> Tensor {
        let (n, d) = (history.rows(), history.cols());
        let mut data = Vec::with_capacity(n * 2 * d);
        for r in 0..n {
            data.extend_from_slice(x_t);
            data.extend_from_slice(history.row(r));
        }
        Tensor::matrix(n, 2 * d, data).expect("pair shape")
    }

    /// Weights `[n, 1]` over the history rows.
    pub fn weights(&self, g: &mut Graph, p: &Bound, pairs: Var) -> Result<Var> {
        let logits = self.importance.forward(g, p, pairs)?;
        g.softmax(logits, 0)
    }

    /// `Σ_i w_i · feat_i` as `[1, width]`.
    pub fn pool(&self, g: &mut Graph, weights: Var, feats: Var) -> Result<Var> {
        let wt = g.transpose(weights)?;
        g.matmul(wt, feats)
    }

    /// Returns `(h_adaptive, weights)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_t: &[f64], history: &Tensor, history_var: Var) -> Result<(Var, Var)> {
        let pairs = g.constant(Self::pairs(x_t, history));
        let w = self.weights(g, p, pairs)?;
        let feats = self.hist_proj.forward(g, p, history_var)?;
        Ok((self.pool(g, w, feats)?, w))
    }
}

/// The four balancing weights, either fixed or trainable as
/// `softplus(raw) + 1e-4`.
#[derive(Debug, Clone)]
pub enum LossWeights {
    Fixed([f64; 4]),
    Learnable([ParamId; 4]),
}

pub const LAMBDA_NAMES: [&str; 4] = ["lambda_pred", "lambda_robust", "lambda_smooth", "lambda_attn"];

impl LossWeights {
    pub fn new(store: &mut ParamStore, cfg: &LossConfig) -> Self {
        let init = [cfg.lambda_pred, cfg.lambda_robust, cfg.lambda_smooth, cfg.lambda_attn];
        if !cfg.learnable {
            return LossWeights::Fixed(init);
        }
        let ids = core::array::from_fn(|i| {
            let raw = softplus_inverse((init[i] - LAMBDA_FLOOR).max(1e-8));
            store.add(alloc::format!("loss.{}_raw", LAMBDA_NAMES[i]), Tensor::full(&[1], raw))
        });
        LossWeights::Learnable(ids)
    }

    pub fn vars(&self, g: &mut Graph, p: &Bound) -> Result<[Var; 4]> {
        match self {
            LossWeights::Fixed(v) => Ok(v.map(|x| g.scalar(x))),
            LossWeights::Learnable(ids) => {
                let mut out = Vec::with_capacity(4);
                for id in ids {
                    let s = g.softplus(p.var(*id))?;
                    let s = g.add_scalar(s, LAMBDA_FLOOR)?;
                    out.push(g.sum(s)?);
                }
                Ok([out[0], out[1], out[2], out[3]])
            }
        }
    }

    /// Current values without a graph.
    pub fn values(&self, store: &ParamStore) -> [f64; 4] {
        match self {
            LossWeights::Fixed(v) => *v,
            LossWeights::Learnable(ids) => ids.map(|id| crate::autodiff::softplus(store.get(id).data()[0]) + LAMBDA_FLOOR),
        }
    }
}
