//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hiercvae_core::data::{synth_series, Split, SynthKind, SynthParams};
use hiercvae_core::forecast::LatentMode;
use hiercvae_core::metrics::{distribution_metrics, MetricsReport};

use crate::checkpoint::Checkpoint;
use crate::error::{AppError, AppResult, EXIT_OK, EXIT_USAGE};
use crate::outputs::{dump_attention, write_forecast_csv, write_plot_file, write_reports, TrainLog};
use crate::pipeline::{self, GRADCHECK_TOL};
use crate::runconfig::RunConfig;
use crate::table_io::write_table;

/// Overrides every command's output directory when set.
pub const OUTPUT_DIR_ENV: &str = "HIERCVAE_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "hiercvae", version, about = "Hierarchical-attention CVAE for probabilistic time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a log and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print every step's loss to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// One-step forecasts over a split, reported as metrics JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Draw latent noise instead of using the posterior mean.
        #[arg(long)]
        sampled: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate windows on one thread.
        #[arg(long)]
        sequential: bool,
        /// Also compare prior samples with the observed marginal.
        #[arg(long)]
        prior: bool,
    },
    /// Multi-step rollout from one origin.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Timestamp label or table row index of the current observation.
        #[arg(long)]
        origin: String,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sampled: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the origin window's attention maps as CSV matrices here.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Generate from the prior, conditioned on consecutive windows.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Parameter-name prefix, e.g. encoder, attention, cvae, heads.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Write a synthetic series as CSV.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output_dir(flag: Option<PathBuf>, fallback: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).or(flag).unwrap_or_else(|| fallback.to_path_buf())
}

fn mode(sampled: bool, seed: u64) -> LatentMode {
    if sampled {
        LatentMode::Sampled { seed }
    } else {
        LatentMode::Mean
    }
}

fn load_with_data(path: &Path) -> AppResult<(Checkpoint, hiercvae_core::data::SeriesTable, hiercvae_core::data::WindowSet)> {
    let ck = Checkpoint::load(path)?;
    let (_, table, set) = pipeline::prepare(&ck.run)?;
    if set.normalizer != ck.normalizer {
        return Err(AppError::Data("data no longer matches the checkpoint's normalization".into()));
    }
    Ok((ck, table, set))
}

pub fn execute(cmd: Command, stdout: &mut dyn Write) -> AppResult<()> {
    let say = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| AppError::io("<stdout>", e));
    match cmd {
        Command::Train { config, out, verbose } => {
            let run = RunConfig::from_file(&config)?;
            if let Some(p) = run.data.path.as_ref().filter(|p| !p.exists()) {
                return Err(AppError::Data(format!("data file {} does not exist", p.display())));
            }
            let dir = output_dir(out, &run.output_dir);
            let outcome = pipeline::train_run(&run, Some(&dir))?;
            if verbose {
                let attn = outcome.checkpoint.trainer.model.attention.is_some();
                for l in &outcome.logs {
                    eprintln!("{}", TrainLog::row(l, attn));
                }
            }
            let last = outcome.logs.last().map_or(f64::NAN, |l| l.loss.total);
            say(stdout, format!("trained {} steps, final total loss {last}, output in {}", outcome.logs.len(), dir.display()))
        }
        Command::Evaluate { checkpoint, split, out, sampled, seed, sequential, prior } => {
            let (ck, table, set) = load_with_data(&checkpoint)?;
            let dir = output_dir(out, checkpoint.parent().unwrap_or(Path::new(".")));
            let mut reports = pipeline::evaluate(&ck, &table, &set, split, mode(sampled, seed), !sequential)?;
            write_reports(&dir, &format!("metrics_{split}"), &reports)?;
            if prior {
                let draws = pipeline::prior_samples(&ck, &set, split, seed)?;
                let truth = pipeline::target_series(&ck, &table, &set, split, LatentMode::Mean, !sequential)?;
                let mut prior_reports: Vec<MetricsReport> = Vec::new();
                for (c, s) in table.target_indices().zip(&truth) {
                    let gen: Vec<f64> = draws.iter().map(|d| d[c]).collect();
                    let obs: Vec<f64> = s.truths.iter().map(|t| t.value).collect();
                    let dm = distribution_metrics(&obs, &gen)?;
                    let mut r = reports.iter().find(|r| r.target == s.name).cloned().ok_or_else(|| AppError::Data("target mismatch".into()))?;
                    r.split = format!("{split}-prior");
                    r.metrics.wasserstein = dm.wasserstein;
                    r.metrics.ks = dm.ks;
                    r.metrics.skew_diff = dm.skew_diff;
                    prior_reports.push(r);
                }
                write_reports(&dir, &format!("metrics_{split}_prior"), &prior_reports)?;
                reports.extend(prior_reports);
            }
            let json = serde_json::to_string_pretty(&reports).map_err(|e| AppError::Data(e.to_string()))?;
            say(stdout, json)
        }
        Command::Forecast { checkpoint, origin, horizon, out, sampled, seed, dump_attention: dump } => {
            if horizon < 1 {
                return Err(hiercvae_core::Error::Contract(format!("forecast horizon must be at least 1, got {horizon}")).into());
            }
            let (ck, table, set) = load_with_data(&checkpoint)?;
            let row = pipeline::resolve_origin(&table, &origin)?;
            let res = pipeline::forecast_from(&ck, &table, &set, row, horizon, mode(sampled, seed))?;
            let dir = output_dir(out, checkpoint.parent().unwrap_or(Path::new(".")));
            let names: Vec<String> = table.column_names().map(String::from).collect();
            let targets: Vec<(usize, String)> = table.target_indices().map(|c| (c, names[c].clone())).collect();
            let label = &table.labels()[row];
            write_forecast_csv(&dir.join("forecast.csv"), label, &res, &targets)?;
            write_plot_file(&dir.join("forecast_plot.dat"), &res, &targets)?;
            if let Some(d) = dump {
                dump_attention(&d, &pipeline::attention_maps(&ck, &set, row)?)?;
            }
            say(stdout, format!("forecast {horizon} steps from {label} written to {}", dir.display()))
        }
        Command::Sample { checkpoint, count, seed, split, out } => {
            let (ck, table, set) = load_with_data(&checkpoint)?;
            let windows = &set.split(split).windows;
            if windows.is_empty() {
                return Err(AppError::Data(format!("split {split} has no windows")));
            }
            let dir = output_dir(out, checkpoint.parent().unwrap_or(Path::new(".")));
            let path = dir.join("samples.csv");
            std::fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
            let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::Data(e.to_string()))?;
            let mut header = vec!["sample".to_string(), "context_timestamp".to_string()];
            header.extend(table.column_names().map(String::from));
            w.write_record(&header).map_err(|e| AppError::Data(e.to_string()))?;
            let model = &ck.trainer.model;
            for i in 0..count {
                let win = &windows[i % windows.len()];
                let (_, draw) = model.sample(&win.history, &win.current, seed, i as u64)?;
                let mut rec = vec![i.to_string(), table.labels()[win.t].clone()];
                rec.extend(ck.normalizer.inverse_row(&draw).iter().map(f64::to_string));
                w.write_record(&rec).map_err(|e| AppError::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| AppError::io(&path, e))?;
            say(stdout, format!("{count} samples written to {}", path.display()))
        }
        Command::Gradcheck { config, module, batch } => {
            let run = RunConfig::from_file(&config)?;
            let start = std::time::Instant::now();
            let (report, worst) = pipeline::gradcheck(&run, module.as_deref(), batch)?;
            say(
                stdout,
                format!(
                    "max relative error {:.3e} over {} coordinates (worst {worst}) in {:.1?}",
                    report.max_rel_error,
                    report.coordinates,
                    start.elapsed()
                ),
            )?;
            if report.passes(GRADCHECK_TOL) {
                Ok(())
            } else {
                Err(hiercvae_core::Error::Numeric(format!("gradient check failed: {:.3e} > {GRADCHECK_TOL:e}", report.max_rel_error)).into())
            }
        }
        Command::Synth { kind, length, out, seed } => {
            let table = synth_series(kind, length, seed, &SynthParams::for_kind(kind))?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
            }
            write_table(&out, &table, "timestamp")?;
            say(stdout, format!("{length} rows of {kind} written to {}", out.display()))
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
