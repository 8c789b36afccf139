//! Line-oriented `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [data]
//! synth = sine
//! history = 24
//! [model]
//! d_model = 32
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiercvae_core::config::{LossConfig, ModelConfig, TrainConfig};
use hiercvae_core::data::{SplitFractions, SynthKind};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// CSV file; relative paths resolve against the config file's directory.
    pub path: Option<PathBuf>,
    /// Synthetic series used when no path is given.
    pub synth: Option<SynthKind>,
    pub synth_length: usize,
    pub synth_seed: u64,
    pub timestamp: String,
    /// Covariate columns; `None` means every non-target numeric column.
    pub features: Option<Vec<String>>,
    /// Target columns; `None` means the last column.
    pub targets: Option<Vec<String>>,
    pub history: usize,
    pub splits: SplitFractions,
    /// Substitute known future covariates during multi-step rollouts.
    pub teacher_covariates: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synth: None,
            synth_length: 2000,
            synth_seed: 0,
            timestamp: "timestamp".into(),
            features: None,
            targets: None,
            history: 24,
            splits: SplitFractions::default(),
            teacher_covariates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `input_dim` and `history` are filled in from the data.
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value {v:?}: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean {v:?}")),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|(line, detail)| AppError::Parse { path: path.into(), line, detail })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    /// Parses config text; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["data", "model", "loss", "train", "output"].contains(&section.as_str()) {
                    return Err((i + 1, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or((i + 1, format!("expected key = value, got {line:?}")))?;
            cfg.set(&section, key.trim(), value.trim()).map_err(|e| (i + 1, e))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let (d, m, l, t) = (&mut self.data, &mut self.model, &mut self.loss, &mut self.train);
        match (section, key) {
            ("data", "path") => d.path = Some(PathBuf::from(v)),
            ("data", "synth") => d.synth = Some(parse_value(v)?),
            ("data", "synth_length") => d.synth_length = parse_value(v)?,
            ("data", "synth_seed") => d.synth_seed = parse_value(v)?,
            ("data", "timestamp") => d.timestamp = v.to_string(),
            ("data", "features") => d.features = Some(parse_list(v)),
            ("data", "targets") => d.targets = Some(parse_list(v)),
            ("data", "history") => d.history = parse_value(v)?,
            ("data", "train") => d.splits.train = parse_value(v)?,
            ("data", "val") => d.splits.val = parse_value(v)?,
            ("data", "test") => d.splits.test = parse_value(v)?,
            ("data", "teacher_covariates") => d.teacher_covariates = parse_bool(v)?,
            ("model", "d_model") => m.d_model = parse_value(v)?,
            ("model", "heads") => m.heads = parse_value(v)?,
            ("model", "lstm_hidden") => m.lstm_hidden = parse_value(v)?,
            ("model", "latent_dim") => m.latent_dim = parse_value(v)?,
            ("model", "latent_tokens") => m.latent_tokens = parse_value(v)?,
            ("model", "latent_heads") => m.latent_heads = parse_value(v)?,
            ("model", "layers") => m.layers = parse_value(v)?,
            ("model", "hidden") => m.hidden = parse_value(v)?,
            ("model", "trend_kernel") => m.trend_kernel = parse_value(v)?,
            ("model", "use_hier_attn") => m.use_hier_attn = parse_bool(v)?,
            ("model", "use_resformer") => m.use_resformer = parse_bool(v)?,
            ("model", "use_adaptive_history") => m.use_adaptive_history = parse_bool(v)?,
            ("model", "attn_reg_sign") => m.attn_reg_sign = parse_value(v)?,
            ("model", "mask_mode") => m.mask_mode = parse_value(v)?,
            ("model", "init_seed") => m.init_seed = parse_value(v)?,
            ("loss", "lambda_pred") => l.lambda_pred = parse_value(v)?,
            ("loss", "lambda_robust") => l.lambda_robust = parse_value(v)?,
            ("loss", "lambda_smooth") => l.lambda_smooth = parse_value(v)?,
            ("loss", "lambda_attn") => l.lambda_attn = parse_value(v)?,
            ("loss", "learnable") => l.learnable = parse_bool(v)?,
            ("loss", "beta_max") => l.beta_max = parse_value(v)?,
            ("loss", "warmup_steps") => l.warmup_steps = parse_value(v)?,
            ("train", "lr") => t.lr = parse_value(v)?,
            ("train", "batch") => t.batch = parse_value(v)?,
            ("train", "steps") => t.steps = parse_value(v)?,
            ("train", "clip_norm") => t.clip_norm = parse_value(v)?,
            ("train", "seed") => t.seed = parse_value(v)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse_value(v)?,
            ("output", "dir") => self.output_dir = PathBuf::from(v),
            ("", _) => return Err(format!("key {key:?} outside of a section")),
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let _ = writeln!(s, "[data]");
        if let Some(p) = &d.path {
            let _ = writeln!(s, "path = {}", p.display());
        }
        if let Some(k) = d.synth {
            let _ = writeln!(s, "synth = {k}");
        }
        let _ = writeln!(s, "synth_length = {}\nsynth_seed = {}\ntimestamp = {}", d.synth_length, d.synth_seed, d.timestamp);
        if let Some(f) = &d.features {
            let _ = writeln!(s, "features = {}", f.join(","));
        }
        if let Some(f) = &d.targets {
            let _ = writeln!(s, "targets = {}", f.join(","));
        }
        let _ = writeln!(
            s,
            "history = {}\ntrain = {}\nval = {}\ntest = {}\nteacher_covariates = {}",
            d.history, d.splits.train, d.splits.val, d.splits.test, d.teacher_covariates
        );
        let _ = writeln!(
            s,
            "[model]\nd_model = {}\nheads = {}\nlstm_hidden = {}\nlatent_dim = {}\nlatent_tokens = {}\nlatent_heads = {}\nlayers = {}\nhidden = {}\ntrend_kernel = {}",
            m.d_model, m.heads, m.lstm_hidden, m.latent_dim, m.latent_tokens, m.latent_heads, m.layers, m.hidden, m.trend_kernel
        );
        let _ = writeln!(
            s,
            "use_hier_attn = {}\nuse_resformer = {}\nuse_adaptive_history = {}\nattn_reg_sign = {}\nmask_mode = {}\ninit_seed = {}",
            m.use_hier_attn, m.use_resformer, m.use_adaptive_history, m.attn_reg_sign, m.mask_mode, m.init_seed
        );
        let _ = writeln!(
            s,
            "[loss]\nlambda_pred = {}\nlambda_robust = {}\nlambda_smooth = {}\nlambda_attn = {}\nlearnable = {}\nbeta_max = {}\nwarmup_steps = {}",
            l.lambda_pred, l.lambda_robust, l.lambda_smooth, l.lambda_attn, l.learnable, l.beta_max, l.warmup_steps
        );
        let _ = writeln!(
            s,
            "[train]\nlr = {}\nbatch = {}\nsteps = {}\nclip_norm = {}\nseed = {}\ncheckpoint_every = {}",
            t.lr, t.batch, t.steps, t.clip_norm, t.seed, t.checkpoint_every
        );
        let _ = writeln!(s, "[output]\ndir = {}", self.output_dir.display());
        s
    }

    /// Model config with the data-derived sizes filled in.
    pub fn model_for(&self, input_dim: usize) -> ModelConfig {
        ModelConfig { input_dim, history: self.data.history, ..self.model.clone() }
    }

    pub fn validate(&self) -> AppResult<()> {
        self.data.splits.validate()?;
        self.model_for(1).validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.path.is_none() && self.data.synth.is_none() {
            return Err(AppError::Usage("config needs [data] path or synth".into()));
        }
        Ok(())
    }
}
