//! Run configuration: model shape, optimization, evaluation and data paths.
//!
//! A config is a flat TOML file; CLI flags override individual fields.
//! Values outside the standard search ranges (dimension, layers, heads,
//! dropout, learning rate, L2 weight, window length) are rejected unless
//! `allow_nonstandard` is set, so accidental typos do not silently produce
//! off-grid runs.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stochastic embeddings with Wasserstein self-attention.
    Stosa,
    /// Scaled dot-product self-attention over point embeddings.
    DotBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Softmax over negative distances (default): nearer keys weigh more.
    Softmax,
    /// Literal ratio of each attention value to the causal-prefix sum;
    /// farther keys weigh more and a zero denominator is an error. Kept
    /// selectable for comparison.
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub variant: Variant,
    /// Total embedding dimension; STOSA splits it evenly between the mean
    /// and covariance paths.
    pub d: usize,
    /// Window length n.
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Also apply dropout to normalized attention weights during training.
    pub attention_dropout: bool,
    pub lr: f64,
    /// L2 weight (beta).
    pub beta: f64,
    /// Positive-vs-negative regularizer weight (lambda).
    pub lambda: f64,
    pub norm_mode: NormMode,
    pub seed: u64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_ns: Vec<usize>,
    /// Exclude each user's seen items from ranking candidates; turn off to
    /// rank the full vocabulary literally.
    pub exclude_seen: bool,
    /// Accept hyperparameters outside the standard search ranges.
    pub allow_nonstandard: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            out_dir: None,
            variant: Variant::Stosa,
            d: 64,
            n: 50,
            layers: 2,
            heads: 1,
            dropout: 0.5,
            attention_dropout: true,
            lr: 1e-3,
            beta: 1e-3,
            lambda: 0.1,
            norm_mode: NormMode::Softmax,
            seed: 42,
            patience: 50,
            max_epochs: 500,
            batch_size: 256,
            eval_ns: vec![1, 5],
            exclude_seen: true,
            allow_nonstandard: false,
        }
    }
}

fn within(value: f64, allowed: &[f64]) -> bool {
    allowed.iter().any(|&a| (a - value).abs() < 1e-12)
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| CoreError::Config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Per-path width: d/2 for STOSA, d for the baseline.
    pub fn path_dim(&self) -> usize {
        match self.variant {
            Variant::Stosa => self.d / 2,
            Variant::DotBaseline => self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(CoreError::Config(format!(
                "d must be a positive even number, got {}",
                self.d
            )));
        }
        if self.n == 0 {
            return Err(CoreError::Config("n must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(CoreError::Config("layers must be >= 1".into()));
        }
        if self.heads == 0 || self.path_dim() % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "heads ({}) must divide the per-path dimension ({})",
                self.heads,
                self.path_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config("dropout must be in [0, 1)".into()));
        }
        if self.lr <= 0.0 {
            return Err(CoreError::Config("lr must be positive".into()));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            return Err(CoreError::Config("beta and lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.eval_ns.is_empty() {
            return Err(CoreError::Config("eval_ns must be non-empty".into()));
        }
        if !self.allow_nonstandard {
            let standard = [
                (self.d as f64, vec![32.0, 64.0, 128.0], "d"),
                (self.n as f64, vec![50.0, 100.0], "n"),
                (self.layers as f64, vec![1.0, 2.0, 3.0], "layers"),
                (self.heads as f64, vec![1.0, 2.0, 4.0], "heads"),
                (self.dropout, vec![0.3, 0.5, 0.7], "dropout"),
                (self.lr, vec![1e-3, 1e-4], "lr"),
                (self.beta, vec![1e-1, 1e-2, 1e-3], "beta"),
            ];
            for (value, allowed, name) in standard {
                if !within(value, &allowed) {
                    return Err(CoreError::Config(format!(
                        "{name} = {value} is outside the standard search range {allowed:?}; \
                         set allow_nonstandard to override"
                    )));
                }
            }
        }
        Ok(())
    }
}
