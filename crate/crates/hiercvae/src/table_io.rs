//! CSV series loading and writing.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use hiercvae_core::data::{synth_series, SeriesTable, SynthParams};
use hiercvae_core::Error as CoreError;

use crate::error::{AppError, AppResult};
use crate::runconfig::DataConfig;

const DATETIME_FORMATS: [&str; 8] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
    "%d.%m.%Y %H:%M:%S",
    "%d.%m.%Y %H:%M",
];

/// Integer timestamps are taken as-is; ISO-8601 and common date-time forms
/// become Unix seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for f in DATETIME_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)).map(|dt| dt.and_utc().timestamp())
}

fn parse_err(path: &Path, line: u64, detail: impl Into<String>) -> AppError {
    AppError::Parse { path: path.into(), line: line as usize, detail: detail.into() }
}

/// Reads a CSV with a header row. Target and feature columns come from
/// `cfg` (defaults: last column is the target, every other non-timestamp
/// column is a feature).
pub fn load_csv(path: &Path, cfg: &DataConfig) -> AppResult<SeriesTable> {
    let file = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let ts_col = header
        .iter()
        .position(|h| *h == cfg.timestamp)
        .ok_or_else(|| AppError::Core(CoreError::Schema(format!("{}: no timestamp column {:?}", path.display(), cfg.timestamp))))?;
    let others: Vec<String> = header.iter().filter(|h| **h != cfg.timestamp).cloned().collect();
    let targets = match &cfg.targets {
        Some(t) => t.clone(),
        None => others.last().cloned().into_iter().collect(),
    };
    let features = match &cfg.features {
        Some(f) => f.clone(),
        None => others.iter().filter(|h| !targets.contains(h)).cloned().collect(),
    };
    let mut index = Vec::new();
    for name in features.iter().chain(&targets) {
        let i = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AppError::Core(CoreError::Schema(format!("{}: missing column {name:?}", path.display()))))?;
        index.push(i);
    }
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); index.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let raw_ts = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| parse_err(path, line, format!("unparseable timestamp {raw_ts:?}")))?;
        timestamps.push(ts);
        labels.push(raw_ts.to_string());
        for (col, &i) in columns.iter_mut().zip(&index) {
            let cell = rec.get(i).unwrap_or("");
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {:?}: not a number {cell:?}", header[i])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {:?}: non-finite value {cell:?}", header[i])));
            }
            col.push(v);
        }
    }
    SeriesTable::new(timestamps, labels, features, targets, columns).map_err(|e| match e {
        CoreError::Ordering { row, detail } => parse_err(path, row as u64 + 2, detail),
        other => AppError::Core(other),
    })
}

/// Loads the configured CSV or generates the configured synthetic series.
pub fn load_data(cfg: &DataConfig) -> AppResult<SeriesTable> {
    match (&cfg.path, cfg.synth) {
        (Some(p), _) => load_csv(p, cfg),
        (None, Some(kind)) => Ok(synth_series(kind, cfg.synth_length, cfg.synth_seed, &SynthParams::for_kind(kind))?),
        (None, None) => Err(AppError::Usage("no data path or synthetic kind configured".into())),
    }
}

pub fn write_table(path: &Path, table: &SeriesTable, timestamp_name: &str) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| AppError::Data(format!("{}: {e}", path.display()));
    let mut header = vec![timestamp_name.to_string()];
    header.extend(table.column_names().map(String::from));
    w.write_record(&header).map_err(io)?;
    for i in 0..table.len() {
        let mut rec = vec![table.labels()[i].clone()];
        rec.extend(table.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}
