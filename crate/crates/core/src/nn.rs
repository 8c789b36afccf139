//! Affine layers and small MLPs built on the graph primitives.
//!
//! Vectors flowing through the model are `[1, k]` row matrices so that every
//! layer is a single `matmul` plus a row-broadcast bias.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = Some(store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn without_bias<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        Linear { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Affine layers with an activation between consecutive layers (none after
/// the last one).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: &[usize], activation: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        use crate::tensor::Tensor;
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias }
    }

    /// Normalizes along the last axis of a rank-2 input.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), 1)
    }
}
