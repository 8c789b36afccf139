//! Multi-modal condition encoder: a bidirectional LSTM over the history,
//! an MLP over per-column moments, a depthwise convolution over first
//! differences, and a tanh fusion layer producing `h_fused`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::stats::Moments;
use crate::tensor::Tensor;

/// One LSTM direction. Gates are packed as `[input, forget, cell, output]`
/// along the last axis.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[input, 4 * hidden], input, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        let bound = 1.0 / libm::sqrt(hidden as f64);
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = rng.random_range(-bound..=bound);
            if (hidden..2 * hidden).contains(&i) {
                *v = 1.0;
            }
        }
        let bias = store.add(format!("{name}.bias"), b);
        LstmParams { w_ih, w_hh, bias, hidden }
    }

    /// Runs the recurrence over `rows` of the precomputed input projection
    /// and returns the final hidden state `[1, h]`.
    fn run(&self, g: &mut Graph, p: &Bound, x_proj: Var, order: impl Iterator<Item = usize>) -> Result<Var> {
        let h = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let mut gates = g.slice(x_proj, 0, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, p.var(self.w_hh))?;
                gates = g.add(gates, rec)?;
            }
            let sig = g.sigmoid(gates)?;
            let i_gate = g.slice(sig, 1, 0, h)?;
            let f_gate = g.slice(sig, 1, h, h)?;
            let o_gate = g.slice(sig, 1, 3 * h, h)?;
            let cand_pre = g.slice(gates, 1, 2 * h, h)?;
            let cand = g.tanh(cand_pre)?;
            let write = g.mul(i_gate, cand)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let keep = g.mul(f_gate, c_prev)?;
                    g.add(keep, write)?
                }
                None => write,
            };
            let c_act = g.tanh(c)?;
            let h_new = g.mul(o_gate, c_act)?;
            state = Some((h_new, c));
        }
        state.map(|(h, _)| h).ok_or_else(|| Error::Size("LSTM over an empty sequence".into()))
    }
}

#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub stat_mlp: Mlp,
    pub trend_kernel: ParamId,
    pub trend_bias: ParamId,
    pub trend_proj: Linear,
    pub fusion: Linear,
    pub d: usize,
    pub d_model: usize,
}

/// Branch outputs, each a `[1, k]` row.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVector {
    pub h_temp: Var,
    pub h_stat: Var,
    pub h_trend: Var,
    pub h_fused: Var,
}

impl ConditionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (d, h, dm) = (cfg.input_dim, cfg.lstm_hidden, cfg.d_model);
        let lstm_fwd = LstmParams::new(store, rng, "encoder.lstm_fwd", d, h);
        let lstm_bwd = LstmParams::new(store, rng, "encoder.lstm_bwd", d, h);
        let stat_mlp = Mlp::new(store, rng, "encoder.stat_mlp", &[4 * d, dm, dm], Activation::Tanh);
        let k = cfg.trend_kernel;
        let trend_kernel = store.add_uniform("encoder.trend.kernel", &[d, k], k, rng);
        let trend_bias = store.add_uniform("encoder.trend.bias", &[d], k, rng);
        let trend_proj = Linear::new(store, rng, "encoder.trend.proj", d, dm);
        let fusion = Linear::new(store, rng, "encoder.fusion", 2 * h + 2 * dm, dm);
        ConditionEncoder { lstm_fwd, lstm_bwd, stat_mlp, trend_kernel, trend_bias, trend_proj, fusion, d, d_model: dm }
    }

    /// Concatenated final hidden states of the forward and backward passes.
    pub fn encode_temporal(&self, g: &mut Graph, p: &Bound, history: Var) -> Result<Var> {
        let n = g.shape(history)[0];
        if n == 0 {
            return Err(Error::Size("empty history".into()));
        }
        let fwd_in = g.matmul(history, p.var(self.lstm_fwd.w_ih))?;
        let fwd_in = g.add(fwd_in, p.var(self.lstm_fwd.bias))?;
        let bwd_in = g.matmul(history, p.var(self.lstm_bwd.w_ih))?;
        let bwd_in = g.add(bwd_in, p.var(self.lstm_bwd.bias))?;
        let hf = self.lstm_fwd.run(g, p, fwd_in, 0..n)?;
        let hb = self.lstm_bwd.run(g, p, bwd_in, (0..n).rev())?;
        g.concat(&[hf, hb], 1)
    }

    /// Moment features `[μ; σ; skew; kurt]`, each a d-vector, as a `[1, 4d]`
    /// row.
    pub fn moment_features(history: &Tensor) -> Tensor {
        let (n, d) = (history.rows(), history.cols());
        let per_col: Vec<[f64; 4]> = (0..d)
            .map(|c| Moments::of((0..n).map(move |r| history.at(r, c))).to_array())
            .collect();
        let mut s = Vec::with_capacity(4 * d);
        for k in 0..4 {
            s.extend(per_col.iter().map(|m| m[k]));
        }
        Tensor::matrix(1, 4 * d, s).expect("moment shape")
    }

    pub fn encode_statistical(&self, g: &mut Graph, p: &Bound, history: &Tensor) -> Result<Var> {
        let s = g.constant(Self::moment_features(history));
        self.stat_mlp.forward(g, p, s)
    }

    /// Consecutive row differences, `(n−1) × d`.
    pub fn differences(history: &Tensor) -> Result<Tensor> {
        let (n, d) = (history.rows(), history.cols());
        if n < 2 {
            return Err(Error::Size(format!("trend branch needs at least 2 history rows, got {n}")));
        }
        let mut out = Vec::with_capacity((n - 1) * d);
        for r in 1..n {
            for c in 0..d {
                out.push(history.at(r, c) - history.at(r - 1, c));
            }
        }
        Tensor::matrix(n - 1, d, out)
    }

    pub fn encode_trend(&self, g: &mut Graph, p: &Bound, history: &Tensor) -> Result<Var> {
        let diffs = g.constant(Self::differences(history)?);
        let conv = g.conv1d(diffs, p.var(self.trend_kernel), p.var(self.trend_bias))?;
        let pooled = g.mean_axis(conv, 0)?;
        let pooled = g.reshape(pooled, &[1, self.d])?;
        self.trend_proj.forward(g, p, pooled)
    }

    pub fn fuse(&self, g: &mut Graph, p: &Bound, h_temp: Var, h_stat: Var, h_trend: Var) -> Result<Var> {
        let cat = g.concat(&[h_temp, h_stat, h_trend], 1)?;
        let z = self.fusion.forward(g, p, cat)?;
        g.tanh(z)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, history: &Tensor, history_var: Var) -> Result<ConditionVector> {
        let h_temp = self.encode_temporal(g, p, history_var)?;
        let h_stat = self.encode_statistical(g, p, history)?;
        let h_trend = self.encode_trend(g, p, history)?;
        let h_fused = self.fuse(g, p, h_temp, h_stat, h_trend)?;
        Ok(ConditionVector { h_temp, h_stat, h_trend, h_fused })
    }
}
