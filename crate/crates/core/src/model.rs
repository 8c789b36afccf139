//! The assembled model: condition encoder, optional hierarchical attention
//! and adaptive history pooling, the CVAE core and the task heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{attention_entropy_var, Attention, AttentionOutput, Scale};
use crate::autodiff::{Graph, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::cvae::{Cvae, LatentVars};
use crate::data::Window;
use crate::encoder::{ConditionEncoder, ConditionVector};
use crate::error::{Error, Result};
use crate::heads::{AdaptiveHistory, Heads, LossWeights, SmoothGate};
use crate::losses::{gaussian_nll, kl_standard_normal, robust_loss, squared_error, total_loss, LossBreakdown, LossTerms};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct HierCvae {
    pub cfg: ModelConfig,
    pub loss_cfg: LossConfig,
    pub store: ParamStore,
    pub encoder: ConditionEncoder,
    pub attention: Option<Attention>,
    pub adaptive: Option<AdaptiveHistory>,
    pub cvae: Cvae,
    pub heads: Heads,
    pub smooth_gate: SmoothGate,
    pub weights: LossWeights,
}

/// Every intermediate of one window's forward pass.
#[derive(Debug, Clone)]
pub struct WindowPass {
    pub x_t: Var,
    pub cond: ConditionVector,
    pub attention: Option<AttentionOutput>,
    pub adaptive_weights: Option<Var>,
    pub context: Var,
    pub latent: LatentVars,
    pub mu_dec: Var,
    pub log_var_dec: Var,
    pub x_hat: Var,
    pub sigma: Var,
}

/// Per-window loss terms before batch averaging.
#[derive(Debug, Clone, Copy)]
pub struct WindowTerms {
    pub recon_nll: Var,
    pub kl: Var,
    pub pred_mse: Var,
    pub robust: Var,
    pub attn_entropy: Option<Var>,
}

/// A graph-free one-step prediction in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x_hat: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu_dec: Vec<f64>,
    pub z_l: Vec<f64>,
    pub alphas: Option<[f64; 3]>,
}

pub(crate) fn row_var(g: &mut Graph, x: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::matrix(1, x.len(), x.to_vec())?))
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let (first, rest) = xs.split_first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut acc = *first;
    for v in rest {
        acc = g.add(acc, *v)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

impl HierCvae {
    pub fn new(cfg: ModelConfig, loss_cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        let mut rng = rng::stream(cfg.init_seed, rng::TAG_INIT, 0, 0);
        let mut store = ParamStore::new();
        let encoder = ConditionEncoder::new(&mut store, &mut rng, &cfg);
        let attention = cfg.use_hier_attn.then(|| Attention::new(&mut store, &mut rng, &cfg));
        let adaptive = cfg.use_adaptive_history.then(|| AdaptiveHistory::new(&mut store, &mut rng, &cfg));
        let context_dim = Self::context_dim_for(&cfg);
        let cvae = Cvae::new(&mut store, &mut rng, &cfg, context_dim);
        let heads = Heads::new(&mut store, &mut rng, &cfg);
        let smooth_gate = SmoothGate::new(&mut store, &mut rng, &cfg);
        let weights = LossWeights::new(&mut store, &loss_cfg);
        Ok(HierCvae { cfg, loss_cfg, store, encoder, attention, adaptive, cvae, heads, smooth_gate, weights })
    }

    /// Width of `c_t = [h_fused; h_attn; h_adaptive]` with disabled
    /// segments dropped.
    pub fn context_dim_for(cfg: &ModelConfig) -> usize {
        cfg.d_model * (1 + usize::from(cfg.use_hier_attn) + usize::from(cfg.use_adaptive_history))
    }

    pub fn context_dim(&self) -> usize {
        Self::context_dim_for(&self.cfg)
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn check_window(&self, history: &Tensor, current: &[f64]) -> Result<()> {
        let (n, d) = (self.cfg.history, self.cfg.input_dim);
        if history.rank() != 2 || history.rows() != n || history.cols() != d || current.len() != d {
            return Err(Error::dim(
                "model",
                format!("expected history {n}x{d} and current {d}, got {:?} and {}", history.shape(), current.len()),
            ));
        }
        Ok(())
    }

    /// Forward pass for one window with the given latent noise.
    pub fn forward_window(&self, g: &mut Graph, p: &Bound, history: &Tensor, current: &[f64], eps: &[f64]) -> Result<WindowPass> {
        self.check_window(history, current)?;
        let hist = g.constant(history.clone());
        let x_t = row_var(g, current)?;
        let cond = self.encoder.forward(g, p, history, hist)?;
        let mut parts = alloc::vec![cond.h_fused];
        let attention = match &self.attention {
            Some(att) => {
                let out = att.forward(g, p, hist, x_t, cond.h_fused)?;
                parts.push(out.h_attn);
                Some(out)
            }
            None => None,
        };
        let adaptive_weights = match &self.adaptive {
            Some(ad) => {
                let (h_ad, w) = ad.forward(g, p, current, history, hist)?;
                parts.push(h_ad);
                Some(w)
            }
            None => None,
        };
        let context = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let latent = self.cvae.latent(g, p, x_t, context, eps)?;
        let (mu_dec, log_var_dec) = self.cvae.decode(g, p, latent.z_l, context)?;
        let x_hat = self.heads.predict(g, p, latent.z_l)?;
        let sigma = self.heads.sigma(g, p, latent.z_l)?;
        Ok(WindowPass { x_t, cond, attention, adaptive_weights, context, latent, mu_dec, log_var_dec, x_hat, sigma })
    }

    pub fn window_terms(&self, g: &mut Graph, pass: &WindowPass, next: &[f64]) -> Result<WindowTerms> {
        let x_next = row_var(g, next)?;
        let recon_nll = gaussian_nll(g, pass.x_t, pass.mu_dec, pass.log_var_dec)?;
        let kl = kl_standard_normal(g, pass.latent.mu, pass.latent.log_var)?;
        let pred_mse = squared_error(g, x_next, pass.x_hat)?;
        let robust = robust_loss(g, x_next, pass.x_hat, pass.sigma)?;
        let attn_entropy = match &pass.attention {
            Some(out) => Some(attention_entropy_var(g, &out.maps)?),
            None => None,
        };
        Ok(WindowTerms { recon_nll, kl, pred_mse, robust, attn_entropy })
    }

    /// The training objective over a time-ordered batch of windows. Per-window
    /// terms are averaged; the smoothness sum is divided by the batch size.
    pub fn batch_objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        windows: &[&Window],
        eps: &[Vec<f64>],
        beta: f64,
    ) -> Result<(Var, LossBreakdown, Vec<WindowPass>)> {
        if windows.is_empty() || windows.len() != eps.len() {
            return Err(Error::Contract(format!("batch of {} windows with {} noise vectors", windows.len(), eps.len())));
        }
        let mut passes = Vec::with_capacity(windows.len());
        let mut terms = Vec::with_capacity(windows.len());
        for (w, e) in windows.iter().zip(eps) {
            let pass = self.forward_window(g, p, &w.history, &w.current, e)?;
            terms.push(self.window_terms(g, &pass, &w.next)?);
            passes.push(pass);
        }
        let pick = |f: fn(&WindowTerms) -> Var| terms.iter().map(f).collect::<Vec<_>>();
        let recon_nll = mean_of(g, &pick(|t| t.recon_nll))?;
        let kl = mean_of(g, &pick(|t| t.kl))?;
        let pred_mse = mean_of(g, &pick(|t| t.pred_mse))?;
        let robust = mean_of(g, &pick(|t| t.robust))?;
        let attn_entropy = match terms.iter().map(|t| t.attn_entropy).collect::<Option<Vec<_>>>() {
            Some(hs) => Some(mean_of(g, &hs)?),
            None => None,
        };
        let zs: Vec<Var> = passes.iter().map(|ps| ps.latent.z_l).collect();
        let xs: Vec<&[f64]> = windows.iter().map(|w| w.current.as_slice()).collect();
        let smooth = self.smooth_gate.loss(g, p, &zs, &xs)?;
        let smooth = g.scale(smooth, 1.0 / windows.len() as f64)?;
        let lambdas = self.weights.vars(g, p)?;
        let parts = LossTerms { recon_nll, kl, pred_mse, robust, smooth, attn_entropy };
        let (total, breakdown) = total_loss(g, &parts, lambdas, beta, self.cfg.attn_reg_sign)?;
        Ok((total, breakdown, passes))
    }

    /// One-step prediction without gradient bookkeeping. `eps = None` uses
    /// the posterior mean (`z0 = μ`).
    pub fn predict(&self, history: &Tensor, current: &[f64], eps: Option<&[f64]>) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zeros;
        let eps = match eps {
            Some(e) => e,
            None => {
                zeros = alloc::vec![0.0; self.latent_dim()];
                &zeros
            }
        };
        let pass = self.forward_window(&mut g, &p, history, current, eps)?;
        let alphas = pass.attention.as_ref().map(|a| {
            let d = g.value(a.alphas).data();
            [d[0], d[1], d[2]]
        });
        Ok(Prediction {
            x_hat: g.value(pass.x_hat).data().to_vec(),
            sigma: g.value(pass.sigma).data().to_vec(),
            mu_dec: g.value(pass.mu_dec).data().to_vec(),
            z_l: g.value(pass.latent.z_l).data().to_vec(),
            alphas,
        })
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.store.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Attention maps of one window, per scale and head.
    pub fn attention_maps(&self, history: &Tensor, current: &[f64]) -> Result<Vec<(Scale, Vec<Tensor>)>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let eps = alloc::vec![0.0; self.latent_dim()];
        let pass = self.forward_window(&mut g, &p, history, current, &eps)?;
        let out = pass.attention.ok_or_else(|| Error::Config("attention is disabled".into()))?;
        Ok(out
            .maps
            .iter()
            .map(|sm| (sm.scale, sm.heads.iter().map(|v| g.value(*v).clone()).collect()))
            .collect())
    }

    /// Generation from the prior given a window's context. Returns the
    /// decoder mean and one draw from the decoder Gaussian.
    pub fn sample(&self, history: &Tensor, current: &[f64], seed: u64, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zero = alloc::vec![0.0; self.latent_dim()];
        let pass = self.forward_window(&mut g, &p, history, current, &zero)?;
        let mut stream = rng::stream(seed, rng::TAG_PRIOR, index, 0);
        let z0 = rng::standard_normals(&mut stream, self.latent_dim());
        let (mu, lv) = self.cvae.sample_prior(&mut g, &p, pass.context, &z0)?;
        let mean = g.value(mu).data().to_vec();
        let noise = rng::standard_normals(&mut stream, mean.len());
        let draw = mean
            .iter()
            .zip(g.value(lv).data())
            .zip(noise)
            .map(|((m, l), e)| m + libm::exp(0.5 * l) * e)
            .collect();
        Ok((mean, draw))
    }
}
