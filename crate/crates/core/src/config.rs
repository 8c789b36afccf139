//! Model, loss and training hyper-parameters.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the learnable locality penalty enters local attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// `scores − s·max(0, |i−j| − b)` before the softmax.
    Additive,
    /// `scores ⊙ exp(−s·max(0, |i−j| − b))` before the softmax.
    Multiplicative,
}

/// Sign with which attention entropy enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnRegSign {
    /// `total −= λ·H`: minimizing the loss raises entropy.
    Diversity,
    /// `total += λ·H`, the formula taken as written.
    Literal,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
    };
}

str_enum!(MaskMode { Additive => "additive", Multiplicative => "multiplicative" });
str_enum!(AttnRegSign { Diversity => "diversity", Literal => "literal" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Row width d (features + targets).
    pub input_dim: usize,
    /// History length n.
    pub history: usize,
    pub d_model: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
    /// Latent size m = latent_tokens · d_tok.
    pub latent_dim: usize,
    pub latent_tokens: usize,
    pub latent_heads: usize,
    /// Number of ResFormer layers L.
    pub layers: usize,
    /// Hidden width of the encoder, decoder and head MLPs.
    pub hidden: usize,
    pub trend_kernel: usize,
    pub use_hier_attn: bool,
    pub use_resformer: bool,
    pub use_adaptive_history: bool,
    pub attn_reg_sign: AttnRegSign,
    pub mask_mode: MaskMode,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 1,
            history: 24,
            d_model: 64,
            heads: 4,
            lstm_hidden: 32,
            latent_dim: 16,
            latent_tokens: 4,
            latent_heads: 1,
            layers: 2,
            hidden: 64,
            trend_kernel: 3,
            use_hier_attn: true,
            use_resformer: true,
            use_adaptive_history: true,
            attn_reg_sign: AttnRegSign::Diversity,
            mask_mode: MaskMode::Additive,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn latent_token_dim(&self) -> usize {
        self.latent_dim / self.latent_tokens.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("history", self.history),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("lstm_hidden", self.lstm_hidden),
            ("latent_dim", self.latent_dim),
            ("latent_tokens", self.latent_tokens),
            ("latent_heads", self.latent_heads),
            ("hidden", self.hidden),
            ("trend_kernel", self.trend_kernel),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.history < 2 {
            return Err(Error::Config("history must be at least 2 for the trend branch".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.latent_dim % self.latent_tokens != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by latent_tokens {}",
                self.latent_dim, self.latent_tokens
            )));
        }
        if self.latent_token_dim() % self.latent_heads != 0 {
            return Err(Error::Config(format!(
                "latent token width {} not divisible by latent_heads {}",
                self.latent_token_dim(),
                self.latent_heads
            )));
        }
        if self.trend_kernel % 2 == 0 {
            return Err(Error::Config("trend_kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_pred: f64,
    pub lambda_robust: f64,
    pub lambda_smooth: f64,
    pub lambda_attn: f64,
    /// Train the λ's as softplus-mapped scalars instead of holding them fixed.
    pub learnable: bool,
    pub beta_max: f64,
    /// Linear KL warmup length in steps.
    pub warmup_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pred: 1.0,
            lambda_robust: 1.0,
            lambda_smooth: 0.1,
            lambda_attn: 0.01,
            learnable: false,
            beta_max: 1.0,
            warmup_steps: 500,
        }
    }
}

impl LossConfig {
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.beta_max;
        }
        self.beta_max * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_pred, self.lambda_robust, self.lambda_smooth, self.lambda_attn, self.beta_max];
        if ls.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, batch: 32, steps: 2000, clip_norm: 5.0, seed: 0, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("batch, lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}
