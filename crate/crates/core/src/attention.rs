//! Local, global and cross-temporal attention over embedded history rows,
//! combined by a softmax gate conditioned on `[x_t; h_fused]`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{MaskMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logs in entropy terms, so
/// that `0·log 0` evaluates to 0.
pub const ENTROPY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Local,
    Global,
    Cross,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Local, Scale::Global, Scale::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Local => "local",
            Scale::Global => "global",
            Scale::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QkvProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub token_embed: Linear,
    pub local: QkvProj,
    pub global: QkvProj,
    /// `q` is the affine cross query projection of the current-state embedding.
    pub cross: QkvProj,
    /// Per-head raw bandwidths; b = softplus(raw) > 0.
    pub bandwidth_raw: ParamId,
    pub slope: ParamId,
    pub gate: Linear,
    pub output_proj: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub mask_mode: MaskMode,
}

/// Attention weights of one scale, one `[rows, n]` map per head.
#[derive(Debug, Clone)]
pub struct ScaleMaps {
    pub scale: Scale,
    pub heads: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub h_attn: Var,
    /// `[1, 3]` fusion weights (local, global, cross).
    pub alphas: Var,
    pub maps: Vec<ScaleMaps>,
    /// Mean row entropy per scale (local, global, cross).
    pub row_entropies: [f64; 3],
}

fn qkv<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dm: usize, query_bias: bool) -> QkvProj {
    let q = if query_bias {
        Linear::new(store, rng, &format!("{name}.q"), dm, dm)
    } else {
        Linear::without_bias(store, rng, &format!("{name}.q"), dm, dm)
    };
    QkvProj {
        q,
        k: Linear::without_bias(store, rng, &format!("{name}.k"), dm, dm),
        v: Linear::without_bias(store, rng, &format!("{name}.v"), dm, dm),
    }
}

/// Inverse of softplus, for initializing positive parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    y + libm::log(-libm::expm1(-y))
}

/// `|i − j|` for an `n × n` grid.
pub fn distance_matrix(n: usize) -> Tensor {
    let data = (0..n * n).map(|k| libm::fabs((k / n) as f64 - (k % n) as f64)).collect();
    Tensor::matrix(n, n, data).expect("square")
}

/// Mean row entropy of a stochastic matrix, with `0·log 0 := 0`.
pub fn mean_row_entropy(map: &Tensor) -> f64 {
    let rows = map.rows();
    let total: f64 = (0..rows)
        .map(|r| map.row(r).iter().filter(|&&p| p > 0.0).map(|&p| -p * libm::log(p)).sum::<f64>())
        .sum();
    total / rows as f64
}

/// Differentiable `−Σ_j A_ij log A_ij` averaged over rows.
pub fn entropy_var(g: &mut Graph, map: Var) -> Result<Var> {
    let rows = g.shape(map)[0] as f64;
    let floored = g.clamp(map, ENTROPY_FLOOR, 1.0)?;
    let logs = g.log(floored)?;
    let plogp = g.mul(map, logs)?;
    let s = g.sum(plogp)?;
    g.scale(s, -1.0 / rows)
}

/// Scaled dot-product attention split into `heads` column blocks, with a
/// per-head transform applied to the scores before the softmax. Returns the
/// concatenated context and one map per head.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mut mask: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<(Var, Vec<Var>)> {
    let width = g.shape(q)[1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::dim("multi_head", format!("width {width} over {heads} heads")));
    }
    let dk = width / heads;
    let inv = 1.0 / libm::sqrt(dk as f64);
    let mut ctx = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dk, dk)?;
        let kh = g.slice(k, 1, h * dk, dk)?;
        let vh = g.slice(v, 1, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, inv)?;
        let s = mask(g, h, s)?;
        let a = g.softmax(s, 1)?;
        ctx.push(g.matmul(a, vh)?);
        maps.push(a);
    }
    Ok((g.concat(&ctx, 1)?, maps))
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (d, dm, h) = (cfg.input_dim, cfg.d_model, cfg.heads);
        let token_embed = Linear::new(store, rng, "attention.token_embed", d, dm);
        let local = qkv(store, rng, "attention.local", dm, false);
        let global = qkv(store, rng, "attention.global", dm, false);
        let cross = qkv(store, rng, "attention.cross", dm, true);
        let bandwidth_raw = store.add("attention.local.bandwidth_raw", Tensor::full(&[h], softplus_inverse(1.5)));
        let slope = store.add("attention.local.slope", Tensor::full(&[h], 0.5));
        let gate = Linear::new(store, rng, "attention.gate", d + dm, 3);
        let output_proj = Linear::new(store, rng, "attention.output_proj", dm, dm);
        Attention {
            token_embed,
            local,
            global,
            cross,
            bandwidth_raw,
            slope,
            gate,
            output_proj,
            heads: h,
            d_model: dm,
            mask_mode: cfg.mask_mode,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn embed(&self, g: &mut Graph, p: &Bound, rows: Var) -> Result<Var> {
        self.token_embed.forward(g, p, rows)
    }

    /// Locally masked self-attention over `tokens` (`n × d_model`).
    pub fn local_attention(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let n = g.shape(tokens)[0];
        let q = self.local.q.forward(g, p, tokens)?;
        let k = self.local.k.forward(g, p, tokens)?;
        let v = self.local.v.forward(g, p, tokens)?;
        let dist = g.constant(distance_matrix(n));
        let bw = g.softplus(p.var(self.bandwidth_raw))?;
        let slope = p.var(self.slope);
        let mode = self.mask_mode;
        multi_head(g, q, k, v, self.heads, |g, h, scores| {
            let b = g.slice(bw, 0, h, 1)?;
            let s = g.slice(slope, 0, h, 1)?;
            let excess = g.sub(dist, b)?;
            let excess = g.relu(excess)?;
            let penalty = g.mul(excess, s)?;
            match mode {
                MaskMode::Additive => g.sub(scores, penalty),
                MaskMode::Multiplicative => {
                    let neg = g.neg(penalty)?;
                    let m = g.exp(neg)?;
                    g.mul(scores, m)
                }
            }
        })
    }

    pub fn global_attention(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.global.q.forward(g, p, tokens)?;
        let k = self.global.k.forward(g, p, tokens)?;
        let v = self.global.v.forward(g, p, tokens)?;
        multi_head(g, q, k, v, self.heads, |_, _, s| Ok(s))
    }

    /// One query from the current-state embedding (`[1, d_model]`) over the
    /// history tokens. Maps are `1 × n`.
    pub fn cross_attention(&self, g: &mut Graph, p: &Bound, current: Var, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.cross.q.forward(g, p, current)?;
        let k = self.cross.k.forward(g, p, tokens)?;
        let v = self.cross.v.forward(g, p, tokens)?;
        multi_head(g, q, k, v, self.heads, |_, _, s| Ok(s))
    }

    /// Pools local/global contexts over tokens, gates the three scales and
    /// applies the output projection.
    pub fn fuse_scales(
        &self,
        g: &mut Graph,
        p: &Bound,
        local_ctx: Var,
        global_ctx: Var,
        cross_ctx: Var,
        x_t: Var,
        h_fused: Var,
    ) -> Result<(Var, Var)> {
        let dm = self.d_model;
        let l = g.mean_axis(local_ctx, 0)?;
        let l = g.reshape(l, &[1, dm])?;
        let gl = g.mean_axis(global_ctx, 0)?;
        let gl = g.reshape(gl, &[1, dm])?;
        let gate_in = g.concat(&[x_t, h_fused], 1)?;
        let logits = self.gate.forward(g, p, gate_in)?;
        let alphas = g.softmax(logits, 1)?;
        let mut mix = None;
        for (i, ctx) in [l, gl, cross_ctx].into_iter().enumerate() {
            let a = g.slice(alphas, 1, i, 1)?;
            let term = g.mul(ctx, a)?;
            mix = Some(match mix {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let mix = mix.ok_or_else(|| Error::contract("no attention scales"))?;
        let h_attn = self.output_proj.forward(g, p, mix)?;
        Ok((h_attn, alphas))
    }

    /// Full hierarchical attention for one window. `history` is `n × d`,
    /// `x_t` is `[1, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, history: Var, x_t: Var, h_fused: Var) -> Result<AttentionOutput> {
        let tokens = self.embed(g, p, history)?;
        let current = self.embed(g, p, x_t)?;
        let (local_ctx, local_maps) = self.local_attention(g, p, tokens)?;
        let (global_ctx, global_maps) = self.global_attention(g, p, tokens)?;
        let (cross_ctx, cross_maps) = self.cross_attention(g, p, current, tokens)?;
        let (h_attn, alphas) = self.fuse_scales(g, p, local_ctx, global_ctx, cross_ctx, x_t, h_fused)?;
        let maps = alloc::vec![
            ScaleMaps { scale: Scale::Local, heads: local_maps },
            ScaleMaps { scale: Scale::Global, heads: global_maps },
            ScaleMaps { scale: Scale::Cross, heads: cross_maps },
        ];
        let mut row_entropies = [0.0; 3];
        for (slot, sm) in row_entropies.iter_mut().zip(&maps) {
            let total: f64 = sm.heads.iter().map(|m| mean_row_entropy(g.value(*m))).sum();
            *slot = total / sm.heads.len() as f64;
        }
        Ok(AttentionOutput { h_attn, alphas, maps, row_entropies })
    }
}

/// Differentiable attention entropy averaged over heads and rows within a
/// scale, then over scales.
pub fn attention_entropy_var(g: &mut Graph, maps: &[ScaleMaps]) -> Result<Var> {
    let mut per_scale = Vec::with_capacity(maps.len());
    for sm in maps {
        let mut acc = None;
        for m in &sm.heads {
            let e = entropy_var(g, *m)?;
            acc = Some(match acc {
                Some(a) => g.add(a, e)?,
                None => e,
            });
        }
        let acc = acc.ok_or_else(|| Error::contract("scale without heads"))?;
        per_scale.push(g.scale(acc, 1.0 / sm.heads.len() as f64)?);
    }
    let n = per_scale.len();
    let first = *per_scale.first().ok_or_else(|| Error::contract("no attention maps"))?;
    let mut total = first;
    for v in &per_scale[1..] {
        total = g.add(total, *v)?;
    }
    g.scale(total, 1.0 / n as f64)
}
