//! Training logs, forecast tables, attention dumps and metric reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use hiercvae_core::attention::Scale;
use hiercvae_core::forecast::ForecastResult;
use hiercvae_core::metrics::MetricsReport;
use hiercvae_core::tensor::Tensor;
use hiercvae_core::train::StepLog;

use crate::error::{AppError, AppResult};

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| AppError::io(path, e))?))
}

/// Per-step loss log. The attention columns exist only when the model has
/// attention.
pub struct TrainLog {
    out: BufWriter<File>,
    with_attn: bool,
    path: std::path::PathBuf,
}

impl TrainLog {
    pub fn header(with_attn: bool) -> String {
        let mut cols = vec!["step", "recon_nll", "kl", "pred_mse", "robust", "smooth"];
        if with_attn {
            cols.push("attn_entropy");
        }
        cols.extend(["total", "beta", "lambda_pred", "lambda_robust", "lambda_smooth"]);
        if with_attn {
            cols.push("lambda_attn");
        }
        cols.push("grad_norm");
        cols.join(",")
    }

    pub fn row(log: &StepLog, with_attn: bool) -> String {
        let l = &log.loss;
        let mut v: Vec<String> = vec![log.step.to_string()];
        v.extend([l.recon_nll, l.kl, l.pred_mse, l.robust, l.smooth].map(|x| x.to_string()));
        if with_attn {
            v.push(l.attn_entropy.unwrap_or(f64::NAN).to_string());
        }
        v.extend([l.total, l.beta, l.lambda_pred, l.lambda_robust, l.lambda_smooth].map(|x| x.to_string()));
        if with_attn {
            v.push(l.lambda_attn.to_string());
        }
        v.push(log.grad_norm.to_string());
        v.join(",")
    }

    pub fn create(path: &Path, with_attn: bool) -> AppResult<Self> {
        let mut out = create(path)?;
        writeln!(out, "{}", Self::header(with_attn)).map_err(|e| AppError::io(path, e))?;
        Ok(TrainLog { out, with_attn, path: path.into() })
    }

    pub fn append(&mut self, log: &StepLog) -> AppResult<()> {
        writeln!(self.out, "{}", Self::row(log, self.with_attn)).map_err(|e| AppError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> AppResult<()> {
        self.out.flush().map_err(|e| AppError::io(&self.path, e))
    }
}

pub const Z95: f64 = 1.96;

/// Forecast table rows for the target columns `targets` (indices into the
/// row) named by `names`.
pub fn write_forecast_csv(path: &Path, origin_label: &str, res: &ForecastResult, targets: &[(usize, String)]) -> AppResult<()> {
    let mut out = create(path)?;
    let io = |e| AppError::io(path, e);
    writeln!(out, "origin_timestamp,horizon_step,target_name,mean,sigma,lo95,hi95").map_err(io)?;
    for k in 0..res.horizon {
        for (c, name) in targets {
            let (m, s) = (res.means[k][*c], res.sigmas[k][*c]);
            writeln!(out, "{origin_label},{},{name},{m},{s},{},{}", k + 1, m - Z95 * s, m + Z95 * s).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Whitespace-separated `horizon mean lo95 hi95` blocks, one per target,
/// separated by blank lines.
pub fn write_plot_file(path: &Path, res: &ForecastResult, targets: &[(usize, String)]) -> AppResult<()> {
    let mut out = create(path)?;
    let io = |e| AppError::io(path, e);
    for (i, (c, name)) in targets.iter().enumerate() {
        if i > 0 {
            writeln!(out, "\n").map_err(io)?;
        }
        writeln!(out, "# {name}\n# horizon mean lo95 hi95").map_err(io)?;
        for k in 0..res.horizon {
            let (m, s) = (res.means[k][*c], res.sigmas[k][*c]);
            writeln!(out, "{} {m} {} {}", k + 1, m - Z95 * s, m + Z95 * s).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn write_matrix_csv(path: &Path, m: &Tensor) -> AppResult<()> {
    let mut out = create(path)?;
    let io = |e| AppError::io(path, e);
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// One `<scale>_head<h>.csv` per attention map.
pub fn dump_attention(dir: &Path, maps: &[(Scale, Vec<Tensor>)]) -> AppResult<()> {
    for (scale, heads) in maps {
        for (h, m) in heads.iter().enumerate() {
            write_matrix_csv(&dir.join(format!("{}_head{h}.csv", scale.name())), m)?;
        }
    }
    Ok(())
}

pub const REPORT_CSV_HEADER: &str =
    "target,split,n_points,mse,mae,mape_pct,smape_pct,r2,wasserstein,ks,skew_diff,ece,picp95,skipped_mape_points";

pub fn report_csv_row(r: &MetricsReport) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.target,
        r.split,
        r.n_points,
        m.mse,
        m.mae,
        m.mape_pct,
        m.smape_pct,
        m.r2,
        m.wasserstein,
        m.ks,
        m.skew_diff,
        m.ece,
        m.picp95,
        r.skipped_mape_points
    )
}

/// Writes `<stem>.json` (an array of reports) and `<stem>.csv`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> AppResult<()> {
    let json_path = dir.join(format!("{stem}.json"));
    let mut out = create(&json_path)?;
    serde_json::to_writer_pretty(&mut out, reports).map_err(|e| AppError::Data(format!("{}: {e}", json_path.display())))?;
    writeln!(out).map_err(|e| AppError::io(&json_path, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut out = create(&csv_path)?;
    let io = |e| AppError::io(&csv_path, e);
    writeln!(out, "{REPORT_CSV_HEADER}").map_err(io)?;
    for r in reports {
        writeln!(out, "{}", report_csv_row(r)).map_err(io)?;
    }
    out.flush().map_err(io)
}
