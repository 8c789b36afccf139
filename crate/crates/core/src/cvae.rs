//! Conditional encoder q(z | x, c), reparameterized sampling, the ResFormer
//! latent stack and the conditional Gaussian decoder p(x | z, c).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::multi_head;
use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear};
use crate::params::{Bound, ParamStore};

pub const LOG_VAR_CLAMP: f64 = 10.0;

/// One `z + MLP(LN(z + MSA(LN(z))))` block acting on `n_tok × d_tok` tokens.
#[derive(Debug, Clone)]
pub struct ResFormerLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl ResFormerLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_tok: usize, heads: usize) -> Self {
        let ffn = 4 * d_tok;
        ResFormerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_tok),
            q: Linear::new(store, rng, &format!("{name}.msa.q"), d_tok, d_tok),
            k: Linear::new(store, rng, &format!("{name}.msa.k"), d_tok, d_tok),
            v: Linear::new(store, rng, &format!("{name}.msa.v"), d_tok, d_tok),
            o: Linear::new(store, rng, &format!("{name}.msa.o"), d_tok, d_tok),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_tok),
            ff1: Linear::new(store, rng, &format!("{name}.mlp.0"), d_tok, ffn),
            ff2: Linear::new(store, rng, &format!("{name}.mlp.1"), ffn, d_tok),
            heads,
        }
    }

    pub fn msa(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let (ctx, _) = multi_head(g, q, k, v, self.heads, |_, _, s| Ok(s))?;
        self.o.forward(g, p, ctx)
    }

    pub fn mlp(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ff1.forward(g, p, x)?;
        let h = g.softplus(h)?;
        self.ff2.forward(g, p, h)
    }

    /// `tokens` is `n_tok × d_tok`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let normed = self.ln1.forward(g, p, tokens)?;
        let attended = self.msa(g, p, normed)?;
        let inner = g.add(tokens, attended)?;
        let inner = self.ln2.forward(g, p, inner)?;
        let update = self.mlp(g, p, inner)?;
        g.add(tokens, update)
    }
}

/// Trunk `Linear → softplus` followed by a mean head and a clamped
/// log-variance head.
#[derive(Debug, Clone)]
pub struct GaussianMlp {
    pub trunk: Linear,
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianMlp {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize, out: usize) -> Self {
        GaussianMlp {
            trunk: Linear::new(store, rng, &format!("{name}.trunk"), input, hidden),
            mean: Linear::new(store, rng, &format!("{name}.mean"), hidden, out),
            log_var: Linear::new(store, rng, &format!("{name}.log_var"), hidden, out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, p, x)?;
        let h = Activation::Softplus.apply(g, h)?;
        let mu = self.mean.forward(g, p, h)?;
        let lv = self.log_var.forward(g, p, h)?;
        let lv = g.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok((mu, lv))
    }
}

#[derive(Debug, Clone)]
pub struct Cvae {
    pub encoder: GaussianMlp,
    pub layers: Vec<ResFormerLayer>,
    pub decoder: GaussianMlp,
    pub latent_dim: usize,
    pub latent_tokens: usize,
    pub input_dim: usize,
    pub context_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub log_var: Var,
    pub z0: Var,
    pub z_l: Var,
}

impl Cvae {
    /// `context_dim` is the width of `c_t`. ResFormer layers are created
    /// only when `use_resformer` is set.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, context_dim: usize) -> Self {
        let (d, m, hid) = (cfg.input_dim, cfg.latent_dim, cfg.hidden);
        let encoder = GaussianMlp::new(store, rng, "cvae.encoder", d + context_dim, hid, m);
        let layers = if cfg.use_resformer {
            (0..cfg.layers)
                .map(|l| ResFormerLayer::new(store, rng, &format!("cvae.resformer.{l}"), cfg.latent_token_dim(), cfg.latent_heads))
                .collect()
        } else {
            Vec::new()
        };
        let decoder = GaussianMlp::new(store, rng, "cvae.decoder", m + context_dim, hid, d);
        Cvae { encoder, layers, decoder, latent_dim: m, latent_tokens: cfg.latent_tokens, input_dim: d, context_dim }
    }

    /// `x_t` is `[1, d]` and `c` is `[1, context_dim]`. Returns `(μ, log σ²)`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x_t: Var, c: Var) -> Result<(Var, Var)> {
        let input = g.concat(&[x_t, c], 1)?;
        self.encoder.forward(g, p, input)
    }

    /// `z0 = μ + exp(log σ² / 2) ∘ eps`, with `eps` a constant.
    pub fn reparameterize(&self, g: &mut Graph, mu: Var, log_var: Var, eps: &[f64]) -> Result<Var> {
        if eps.len() != self.latent_dim {
            return Err(Error::dim("reparameterize", format!("eps has {} entries, latent is {}", eps.len(), self.latent_dim)));
        }
        let e = g.constant(crate::tensor::Tensor::matrix(1, eps.len(), eps.to_vec())?);
        let half = g.scale(log_var, 0.5)?;
        let sd = g.exp(half)?;
        let noise = g.mul(sd, e)?;
        g.add(mu, noise)
    }

    /// Applies the ResFormer layers to a `[1, m]` latent and returns `[1, m]`.
    pub fn resformer_stack(&self, g: &mut Graph, p: &Bound, z0: Var) -> Result<Var> {
        if self.layers.is_empty() {
            return Ok(z0);
        }
        let d_tok = self.latent_dim / self.latent_tokens;
        let mut tokens = g.reshape(z0, &[self.latent_tokens, d_tok])?;
        for layer in &self.layers {
            tokens = layer.forward(g, p, tokens)?;
        }
        g.reshape(tokens, &[1, self.latent_dim])
    }

    pub fn decode(&self, g: &mut Graph, p: &Bound, z_l: Var, c: Var) -> Result<(Var, Var)> {
        let input = g.concat(&[z_l, c], 1)?;
        self.decoder.forward(g, p, input)
    }

    /// Encode, sample with the supplied `eps` and refine.
    pub fn latent(&self, g: &mut Graph, p: &Bound, x_t: Var, c: Var, eps: &[f64]) -> Result<LatentVars> {
        let (mu, log_var) = self.encode(g, p, x_t, c)?;
        let z0 = self.reparameterize(g, mu, log_var, eps)?;
        let z_l = self.resformer_stack(g, p, z0)?;
        Ok(LatentVars { mu, log_var, z0, z_l })
    }

    /// Generation from the prior `z0 ~ N(0, I)`: returns `(μ_dec, log σ²_dec)`.
    pub fn sample_prior(&self, g: &mut Graph, p: &Bound, c: Var, z0: &[f64]) -> Result<(Var, Var)> {
        if z0.len() != self.latent_dim {
            return Err(Error::dim("sample_prior", format!("z0 has {} entries, latent is {}", z0.len(), self.latent_dim)));
        }
        let z = g.constant(crate::tensor::Tensor::matrix(1, z0.len(), z0.to_vec())?);
        let z_l = self.resformer_stack(g, p, z)?;
        self.decode(g, p, z_l, c)
    }
}
