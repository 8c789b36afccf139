//! Adam with global-norm clipping and the deterministic training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{Window, WindowedDataset};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::HierCvae;
use crate::params::ParamStore;
use crate::rng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter changes.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, gr) in store.ids().zip(grads) {
        if let Some(i) = gr.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {} at index {i}", store.name(id))));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(BETA1, t as f64);
    let c2 = 1.0 - libm::pow(BETA2, t as f64);
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let (m, v, gr) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gr[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gr[i] * gr[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    libm::sqrt(grads.iter().flatten().map(|g| g * g).sum())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Table rows of the current observations in the batch.
    pub batch_rows: Vec<usize>,
}

/// Start index of the contiguous batch for `step`.
pub fn batch_start(seed: u64, step: usize, windows: usize, batch: usize) -> usize {
    if windows <= batch {
        return 0;
    }
    rng::stream(seed, rng::TAG_BATCH, step as u64, 0).random_range(0..=windows - batch)
}

/// Latent noise for the window whose current row is `row`, at `step`.
pub fn train_eps(seed: u64, step: usize, row: usize, latent: usize) -> Vec<f64> {
    rng::normals(seed, rng::TAG_TRAIN_EPS, step as u64, row as u64, latent)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HierCvae,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    /// Steps completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: HierCvae, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer { model, cfg, adam, step: 0 })
    }

    pub fn batch<'a>(&self, data: &'a WindowedDataset, step: usize) -> &'a [Window] {
        let start = batch_start(self.cfg.seed, step, data.len(), self.cfg.batch);
        let end = (start + self.cfg.batch).min(data.len());
        &data.windows[start..end]
    }

    /// Loss and gradients for one batch at the current parameters.
    pub fn loss_and_grads(&self, windows: &[Window], step: usize) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let m = self.model.latent_dim();
        let eps: Vec<Vec<f64>> = windows.iter().map(|w| train_eps(self.cfg.seed, step, w.t, m)).collect();
        let refs: Vec<&Window> = windows.iter().collect();
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let beta = self.model.loss_cfg.beta_at(step);
        let (total, breakdown, _) = self.model.batch_objective(&mut g, &p, &refs, &eps, beta)?;
        g.backward(total)?;
        let grads = self
            .model
            .store
            .tensors()
            .iter()
            .zip(p.vars())
            .map(|(t, v)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((breakdown, grads))
    }

    /// One optimization step. On failure the parameters are left untouched
    /// and the error names the batch rows.
    pub fn train_step(&mut self, data: &WindowedDataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Size("no training windows".into()));
        }
        let step = self.step;
        let windows = self.batch(data, step);
        let rows: Vec<usize> = windows.iter().map(|w| w.t).collect();
        let with_rows = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}, batch rows {rows:?}: {msg}")),
            other => other,
        };
        let (loss, mut grads) = self.loss_and_grads(windows, step).map_err(with_rows)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(with_rows(Error::Numeric(format!("gradient norm is {grad_norm}"))));
        }
        adam_step(&mut self.model.store, &grads, &mut self.adam, self.cfg.lr).map_err(with_rows)?;
        self.step += 1;
        Ok(StepLog { step, loss, grad_norm, batch_rows: rows.clone() })
    }

    /// Runs until `cfg.steps` steps are done, reporting each step.
    pub fn run<E: From<Error>>(
        &mut self,
        data: &WindowedDataset,
        mut on_step: impl FnMut(&Trainer, &StepLog) -> core::result::Result<(), E>,
    ) -> core::result::Result<(), E> {
        while self.step < self.cfg.steps {
            let log = self.train_step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}
