//! End-to-end operations shared by the CLI and the integration tests.

use std::path::Path;

use hiercvae_core::attention::Scale;
use hiercvae_core::autodiff::Graph;
use hiercvae_core::data::{make_windows, window_at, SeriesTable, Split, Window, WindowSet};
use hiercvae_core::forecast::{ForecastContext, ForecastResult, LatentMode};
use hiercvae_core::gradcheck::{grad_check_many, GradCheckReport};
use hiercvae_core::metrics::{build_report, ForecastPoint, MetricsReport, Observation};
use hiercvae_core::model::{HierCvae, Prediction};
use hiercvae_core::params::Bound;
use hiercvae_core::rng;
use hiercvae_core::tensor::Tensor;
use hiercvae_core::train::{train_eps, StepLog, Trainer};
use hiercvae_core::Error as CoreError;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{AppError, AppResult};
use crate::outputs::TrainLog;
use crate::runconfig::RunConfig;
use crate::table_io::load_data;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Loads the data and cuts windows. The returned config has its feature and
/// target lists resolved from the table.
pub fn prepare(run: &RunConfig) -> AppResult<(RunConfig, SeriesTable, WindowSet)> {
    run.validate()?;
    let table = load_data(&run.data)?;
    let set = make_windows(&table, run.data.history, run.data.splits)?;
    let mut resolved = run.clone();
    resolved.data.features = Some(table.feature_names().to_vec());
    resolved.data.targets = Some(table.target_names().to_vec());
    Ok((resolved, table, set))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
}

/// Trains from scratch. With `out_dir`, writes `train_log.csv`, periodic
/// `checkpoint-<step>.bin` files and a final `checkpoint.bin`; on a numeric
/// failure writes `checkpoint-failed.bin` holding the last good state.
pub fn train_run(run: &RunConfig, out_dir: Option<&Path>) -> AppResult<TrainOutcome> {
    let (resolved, _table, set) = prepare(run)?;
    let model = HierCvae::new(resolved.model_for(set.normalizer.dim()), resolved.loss.clone())?;
    let with_attn = model.attention.is_some();
    let mut trainer = Trainer::new(model, resolved.train.clone())?;
    let mut log = out_dir.map(|d| TrainLog::create(&d.join("train_log.csv"), with_attn)).transpose()?;
    let mut logs = Vec::with_capacity(resolved.train.steps);
    let every = resolved.train.checkpoint_every;
    let snapshot = |trainer: &Trainer| Checkpoint { run: resolved.clone(), normalizer: set.normalizer.clone(), trainer: trainer.clone() };
    let result = trainer.run(&set.train, |t, step| -> AppResult<()> {
        if let Some(l) = log.as_mut() {
            l.append(step)?;
        }
        logs.push(step.clone());
        if let Some(dir) = out_dir {
            if every > 0 && t.step % every == 0 && t.step < t.cfg.steps {
                snapshot(t).save(&dir.join(format!("checkpoint-{}.bin", t.step)))?;
            }
        }
        Ok(())
    });
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Err(e) = result {
        if let Some(dir) = out_dir {
            snapshot(&trainer).save(&dir.join("checkpoint-failed.bin"))?;
        }
        return Err(e);
    }
    let checkpoint = snapshot(&trainer);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("checkpoint.bin"))?;
    }
    Ok(TrainOutcome { checkpoint, logs })
}

/// One-step predictions for every window, in window order. Sampled mode
/// keys noise by `(seed, window row)`, so the result does not depend on
/// `parallel`.
pub fn predict_windows(model: &HierCvae, windows: &[Window], mode: LatentMode, parallel: bool) -> AppResult<Vec<Prediction>> {
    let one = |w: &Window| -> Result<Prediction, CoreError> {
        let eps = match mode {
            LatentMode::Mean => None,
            LatentMode::Sampled { seed } => Some(window_eps(seed, w.t, model.latent_dim())),
        };
        model.predict(&w.history, &w.current, eps.as_deref())
    };
    let out: Result<Vec<_>, _> =
        if parallel { windows.par_iter().map(one).collect() } else { windows.iter().map(one).collect() };
    Ok(out?)
}

pub fn window_eps(seed: u64, row: usize, latent: usize) -> Vec<f64> {
    rng::normals(seed, rng::TAG_EVAL_EPS, row as u64, u64::MAX, latent)
}

/// Predicted vs true next values for one target column, in data units.
#[derive(Debug, Clone)]
pub struct TargetSeries {
    pub name: String,
    pub forecasts: Vec<ForecastPoint>,
    pub truths: Vec<Observation>,
}

pub fn target_series(ck: &Checkpoint, table: &SeriesTable, set: &WindowSet, split: Split, mode: LatentMode, parallel: bool) -> AppResult<Vec<TargetSeries>> {
    let windows = &set.split(split).windows;
    if windows.is_empty() {
        return Err(AppError::Data(format!("split {split} has no windows")));
    }
    let preds = predict_windows(&ck.trainer.model, windows, mode, parallel)?;
    let norm = &ck.normalizer;
    let out = table
        .target_indices()
        .map(|c| {
            let name = table.column_names().nth(c).unwrap_or("?").to_string();
            let forecasts = windows
                .iter()
                .zip(&preds)
                .map(|(w, p)| ForecastPoint {
                    timestamp: table.timestamps()[w.t + 1],
                    mean: norm.inverse_value(c, p.x_hat[c]),
                    sigma: p.sigma[c] * norm.std[c],
                })
                .collect();
            let truths = windows
                .iter()
                .map(|w| Observation { timestamp: table.timestamps()[w.t + 1], value: table.columns()[c][w.t + 1] })
                .collect();
            TargetSeries { name, forecasts, truths }
        })
        .collect();
    Ok(out)
}

pub fn evaluate(ck: &Checkpoint, table: &SeriesTable, set: &WindowSet, split: Split, mode: LatentMode, parallel: bool) -> AppResult<Vec<MetricsReport>> {
    let series = target_series(ck, table, set, split, mode, parallel)?;
    let split_name = split.to_string();
    series
        .iter()
        .map(|s| Ok(build_report(&s.name, &split_name, &s.forecasts, &s.truths)?))
        .collect()
}

/// Prior samples against the split's observed values: the generated
/// marginal replaces the one-step forecasts in the distribution metrics.
pub fn prior_samples(ck: &Checkpoint, set: &WindowSet, split: Split, seed: u64) -> AppResult<Vec<Vec<f64>>> {
    let windows = &set.split(split).windows;
    let model = &ck.trainer.model;
    let out: Result<Vec<_>, CoreError> = windows
        .par_iter()
        .map(|w| model.sample(&w.history, &w.current, seed, w.t as u64).map(|(_, draw)| ck.normalizer.inverse_row(&draw)))
        .collect();
    Ok(out?)
}

/// Resolves an origin given as a table row index or a timestamp label.
pub fn resolve_origin(table: &SeriesTable, origin: &str) -> AppResult<usize> {
    if let Some(i) = table.labels().iter().position(|l| l == origin) {
        return Ok(i);
    }
    origin.parse::<usize>().ok().filter(|&i| i < table.len()).ok_or_else(|| AppError::Data(format!("origin {origin:?} is neither a timestamp nor a row index")))
}

/// Multi-step rollout from table row `origin` (the current observation).
pub fn forecast_from(ck: &Checkpoint, table: &SeriesTable, set: &WindowSet, origin: usize, horizon: usize, mode: LatentMode) -> AppResult<ForecastResult> {
    if horizon < 1 {
        return Err(CoreError::Contract(format!("forecast horizon must be at least 1, got {horizon}")).into());
    }
    let n = ck.run.data.history;
    if origin < n || origin >= set.normalized.len() {
        return Err(AppError::Data(format!("origin row {origin} needs {n} history rows inside a table of {}", set.normalized.len())));
    }
    let rows = &set.normalized;
    let flat: Vec<f64> = rows[origin - n..origin].iter().flatten().copied().collect();
    let history = Tensor::matrix(n, rows[0].len(), flat)?;
    let future: Option<Vec<Vec<f64>>> = (ck.run.data.teacher_covariates && !table.feature_names().is_empty())
        .then(|| rows[origin + 1..].iter().take(horizon).cloned().collect());
    let ctx = ForecastContext { model: &ck.trainer.model, normalizer: &ck.normalizer, targets: table.target_indices() };
    Ok(ctx.forecast_multi(&history, &rows[origin], origin, horizon, mode, future.as_deref())?)
}

pub fn attention_maps(ck: &Checkpoint, set: &WindowSet, origin: usize) -> AppResult<Vec<(Scale, Vec<Tensor>)>> {
    let n = ck.run.data.history;
    let w = window_at(&set.normalized, n, origin)?;
    Ok(ck.trainer.model.attention_maps(&w.history, &w.current)?)
}

/// Central-difference check of the batch objective over every parameter
/// whose name starts with `prefix` (all when `None`), on the first
/// `batch` training windows with fixed noise.
pub fn gradcheck(run: &RunConfig, prefix: Option<&str>, batch: usize) -> AppResult<(GradCheckReport, String)> {
    let (resolved, _table, set) = prepare(run)?;
    let model = HierCvae::new(resolved.model_for(set.normalizer.dim()), resolved.loss.clone())?;
    let windows: Vec<&Window> = set.train.windows.iter().take(batch.max(1)).collect();
    if windows.is_empty() {
        return Err(AppError::Data("no training windows for the gradient check".into()));
    }
    let eps: Vec<Vec<f64>> = windows.iter().map(|w| train_eps(resolved.train.seed, 0, w.t, model.latent_dim())).collect();
    let beta = 0.5 * resolved.loss.beta_max;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    let selected: Vec<bool> = names.iter().map(|n| prefix.map_or(true, |p| n.starts_with(p))).collect();
    if !selected.iter().any(|&s| s) {
        return Err(AppError::Usage(format!("no parameters match module {:?}", prefix.unwrap_or(""))));
    }
    let f = |g: &mut Graph, vars: &[hiercvae_core::autodiff::Var]| {
        let p = Bound::from_vars(vars.to_vec());
        model.batch_objective(g, &p, &windows, &eps, beta).map(|(total, _, _)| total)
    };
    let report = grad_check_many(f, model.store.tensors(), GRADCHECK_EPS, |i| selected[i])?;
    let worst = report.worst.map_or_else(String::new, |(pi, c)| format!("{}[{c}]", names[pi]));
    Ok((report, worst))
}
