//! Time-series tables, train-only z-score normalization, sliding windows with
//! chronological splits, and synthetic fixture generators.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviations below this are clamped during normalization.
pub const MIN_STD: f64 = 1e-8;

/// Named columns over a strictly increasing time axis.
///
/// Columns are stored features first, then targets; that is also the column
/// order of every window row.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<i64>,
    labels: Vec<String>,
    feature_names: Vec<String>,
    target_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    noise_sigma: Option<Vec<f64>>,
}

impl SeriesTable {
    /// `timestamps` are ordering keys; `labels` are their textual form as
    /// read from (and written back to) files.
    pub fn new(
        timestamps: Vec<i64>,
        labels: Vec<String>,
        feature_names: Vec<String>,
        target_names: Vec<String>,
        columns: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let len = timestamps.len();
        if labels.len() != len {
            return Err(Error::Size(format!("{} labels for {len} timestamps", labels.len())));
        }
        if target_names.is_empty() {
            return Err(Error::Schema("at least one target column is required".into()));
        }
        if columns.len() != feature_names.len() + target_names.len() {
            return Err(Error::Schema(format!(
                "{} columns for {} names",
                columns.len(),
                feature_names.len() + target_names.len()
            )));
        }
        let names = feature_names.iter().chain(&target_names);
        for (name, col) in names.zip(&columns) {
            if col.len() != len {
                return Err(Error::Size(format!("column {name} has {} rows, expected {len}", col.len())));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("column {name} row {i} is not a finite number")));
            }
        }
        if let Some(i) = (1..len).find(|&i| timestamps[i] <= timestamps[i - 1]) {
            return Err(Error::Ordering {
                row: i,
                detail: format!("timestamp {} does not follow {}", labels[i], labels[i - 1]),
            });
        }
        Ok(SeriesTable { timestamps, labels, feature_names, target_names, columns, noise_sigma: None })
    }

    /// Table indexed by `0..len` with the index as label.
    pub fn indexed(feature_names: Vec<String>, target_names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let len = columns.first().map_or(0, Vec::len);
        let timestamps = (0..len as i64).collect();
        let labels = (0..len).map(|i| i.to_string()).collect();
        SeriesTable::new(timestamps, labels, feature_names, target_names, columns)
    }

    pub fn with_noise_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.len() {
            return Err(Error::Size(format!("{} noise values for {} rows", sigma.len(), self.len())));
        }
        self.noise_sigma = Some(sigma);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Row width: features plus targets.
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.feature_names.iter().chain(&self.target_names).map(String::as_str)
    }

    /// Column positions of the targets within a row.
    pub fn target_indices(&self) -> core::ops::Range<usize> {
        self.feature_names.len()..self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_names().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn noise_sigma(&self) -> Option<&[f64]> {
        self.noise_sigma.as_deref()
    }

    /// Same table with every column mapped through `a·x + b`.
    pub fn map_values(&self, a: f64, b: f64) -> SeriesTable {
        let mut out = self.clone();
        for col in &mut out.columns {
            for v in col.iter_mut() {
                *v = a * *v + b;
            }
        }
        out
    }
}

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits population statistics on rows `range` of `table`.
    pub fn fit(table: &SeriesTable, range: core::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > table.len() {
            return Err(Error::Size(format!("cannot fit normalizer on rows {range:?}")));
        }
        let n = range.len() as f64;
        let mut mean = Vec::with_capacity(table.dim());
        let mut std = Vec::with_capacity(table.dim());
        for col in table.columns() {
            let seg = &col[range.clone()];
            let mu = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(libm::sqrt(var).max(MIN_STD));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }

    pub fn inverse_value(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }

    /// Normalized table as rows.
    pub fn transform_table(&self, table: &SeriesTable) -> Vec<Vec<f64>> {
        (0..table.len()).map(|i| self.transform_row(&table.row(i))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || libm::fabs(parts.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Row ranges of the three splits for a table of `len` rows.
    pub fn ranges(&self, len: usize) -> [core::ops::Range<usize>; 3] {
        let train = (libm::round(self.train * len as f64) as usize).min(len);
        let val = (libm::round(self.val * len as f64) as usize).min(len - train);
        [0..train, train..train + val, train + val..len]
    }
}

/// One training example: history `H` (n×d), the current row and the next row.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Table row index of the current observation.
    pub t: usize,
    pub history: Tensor,
    pub current: Vec<f64>,
    pub next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub split: Split,
    pub n: usize,
    pub d: usize,
    /// Table rows covered by this split.
    pub rows: core::ops::Range<usize>,
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Windowed splits plus the normalization fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub normalizer: Normalizer,
    /// The whole table, normalized, one row per timestamp.
    pub normalized: Vec<Vec<f64>>,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl WindowSet {
    pub fn split(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds a window whose current observation is row `t` of `rows`.
pub fn window_at(rows: &[Vec<f64>], n: usize, t: usize) -> Result<Window> {
    if t < n || t + 1 >= rows.len() {
        return Err(Error::Size(format!("no window of length {n} around row {t} of {}", rows.len())));
    }
    let d = rows[t].len();
    let mut flat = Vec::with_capacity(n * d);
    for r in &rows[t - n..t] {
        flat.extend_from_slice(r);
    }
    Ok(Window { t, history: Tensor::matrix(n, d, flat)?, current: rows[t].clone(), next: rows[t + 1].clone() })
}

/// Normalizes `table` with train-only statistics and cuts sliding windows
/// that never cross a split boundary.
pub fn make_windows(table: &SeriesTable, n: usize, splits: SplitFractions) -> Result<WindowSet> {
    splits.validate()?;
    if n == 0 {
        return Err(Error::Size("history length must be positive".into()));
    }
    if table.len() < n + 2 {
        return Err(Error::Size(format!("table has {} rows, need at least n + 2 = {}", table.len(), n + 2)));
    }
    let [train, val, test] = splits.ranges(table.len());
    let normalizer = Normalizer::fit(table, train.clone())?;
    let normalized = normalizer.transform_table(table);
    let cut = |split: Split, range: core::ops::Range<usize>| -> Result<WindowedDataset> {
        let mut windows = Vec::new();
        if range.len() >= n + 2 {
            for t in range.start + n..range.end - 1 {
                windows.push(window_at(&normalized[..range.end], n, t)?);
            }
        }
        Ok(WindowedDataset { split, n, d: table.dim(), rows: range, windows })
    };
    Ok(WindowSet {
        train: cut(Split::Train, train)?,
        val: cut(Split::Val, val)?,
        test: cut(Split::Test, test)?,
        normalizer,
        normalized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// `amplitude·sin(2πt/period) + mean + σε`
    SineNoise,
    /// `y_t − mean = φ(y_{t−1} − mean) + ε`, ε ~ N(0, σ²)
    Ar1,
    /// Sinusoid with a volatility regime revealed by a cosine feature column;
    /// the per-point noise σ is kept on the table.
    Heteroskedastic,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" | "sine+noise" | "sine_noise" => Ok(SynthKind::SineNoise),
            "ar1" => Ok(SynthKind::Ar1),
            "heteroskedastic" => Ok(SynthKind::Heteroskedastic),
            other => Err(Error::Config(format!("unknown synthetic series kind {other:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::SineNoise => "sine",
            SynthKind::Ar1 => "ar1",
            SynthKind::Heteroskedastic => "heteroskedastic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub period: f64,
    pub amplitude: f64,
    pub mean: f64,
    /// Noise σ for sine and ar1.
    pub noise: f64,
    pub ar_coef: f64,
    /// Heteroskedastic noise range.
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { period: 24.0, amplitude: 1.0, mean: 0.0, noise: 0.0, ar_coef: 0.8, sigma_min: 0.05, sigma_max: 0.5 }
    }
}

/// Deterministic synthetic series for tests and demos.
pub fn synth_series(kind: SynthKind, length: usize, seed: u64, params: &SynthParams) -> Result<SeriesTable> {
    if length == 0 {
        return Err(Error::Size("synthetic series needs length >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let tau = 2.0 * core::f64::consts::PI;
    let phase = |t: usize, period: f64| tau * t as f64 / period;
    let y = String::from("y");
    match kind {
        SynthKind::SineNoise => {
            let col = (0..length)
                .map(|t| params.amplitude * libm::sin(phase(t, params.period)) + params.mean + params.noise * normal())
                .collect();
            SeriesTable::indexed(vec![], vec![y], vec![col])
        }
        SynthKind::Ar1 => {
            let mut col = Vec::with_capacity(length);
            let mut prev = params.mean;
            for _ in 0..length {
                let v = params.mean + params.ar_coef * (prev - params.mean) + params.noise * normal();
                col.push(v);
                prev = v;
            }
            SeriesTable::indexed(vec![], vec![y], vec![col])
        }
        SynthKind::Heteroskedastic => {
            let regime: Vec<f64> = (0..length).map(|t| libm::cos(phase(t, 4.0 * params.period))).collect();
            let sigma: Vec<f64> = regime
                .iter()
                .map(|r| params.sigma_min + (params.sigma_max - params.sigma_min) * 0.5 * (1.0 + r))
                .collect();
            let col = (0..length)
                .map(|t| params.amplitude * libm::sin(phase(t, params.period)) + params.mean + sigma[t] * normal())
                .collect();
            SeriesTable::indexed(vec!["regime".into()], vec![y], vec![regime, col])?.with_noise_sigma(sigma)
        }
    }
}

impl SynthParams {
    /// Defaults per kind: noiseless sine, unit-variance innovations for ar1.
    pub fn for_kind(kind: SynthKind) -> Self {
        match kind {
            SynthKind::Ar1 => SynthParams { noise: 1.0, ..Self::default() },
            _ => Self::default(),
        }
    }
}
