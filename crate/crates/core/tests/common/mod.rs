#![allow(dead_code)]

use hiercvae_core::autodiff::Graph;
use hiercvae_core::config::{LossConfig, ModelConfig};
use hiercvae_core::model::HierCvae;
use hiercvae_core::params::ParamStore;
use hiercvae_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub fn zero_matching(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn set_all(store: &mut ParamStore, prefix: &str, value: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with(prefix) {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// The gradient-check configuration: d=3, n=5, d_model=16, H=2, m=8,
/// n_tok=2, L=2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        history: 5,
        d_model: 16,
        heads: 2,
        lstm_hidden: 4,
        latent_dim: 8,
        latent_tokens: 2,
        latent_heads: 1,
        layers: 2,
        hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_model() -> HierCvae {
    HierCvae::new(tiny_config(), LossConfig::default()).unwrap()
}

pub fn random_window(r: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let h = random_tensor(r, &[n, d], 1.5);
    let cur = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
    let next = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
    (h, cur, next)
}

pub fn value_of(g: &Graph, v: hiercvae_core::autodiff::Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}
