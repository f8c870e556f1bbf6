//! Model and run configuration, JSON-loadable with strict key checking.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// No positional signal in the embeddings (calibrated models).
    None,
    /// Learned absolute position table added to item embeddings.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learned per-query gate mixing spatial and corrected attention.
    Gate,
    /// Plain average of the two maps (ablation baseline).
    Sum,
}

/// Architecture and calibrator switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding size.
    pub d: usize,
    /// Maximum sequence length.
    pub n: usize,
    /// Number of transformer blocks.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Feed-forward inner size.
    pub inner: usize,
    /// Dropout probability in [0, 1).
    pub dropout: f64,
    pub position_mode: PositionMode,
    pub spatial_enabled: bool,
    pub adversarial_enabled: bool,
    pub order_enabled: bool,
    pub distance_enabled: bool,
    pub fusion_mode: FusionMode,
    /// Bypass both calibrators at inference time.
    pub lite_inference: bool,
    /// Balance between perturbation strength and mask-norm penalty.
    pub alpha: f64,
    /// Give each head its own calibrator parameters (otherwise shared).
    pub per_head_calibrators: bool,
    /// Reproduce the printed order-penalty expression instead of the
    /// standard log-likelihood form.
    pub literal_eq10: bool,
    pub layer_norm_enabled: bool,
    pub residual_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n: 50,
            layers: 2,
            heads: 2,
            inner: 64,
            dropout: 0.2,
            position_mode: PositionMode::None,
            spatial_enabled: true,
            adversarial_enabled: true,
            order_enabled: true,
            distance_enabled: true,
            fusion_mode: FusionMode::Gate,
            lite_inference: false,
            alpha: 0.03,
            per_head_calibrators: true,
            literal_eq10: false,
            layer_norm_enabled: true,
            residual_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Head count of calibrator parameter stacks (1 when shared).
    pub fn calibrator_heads(&self) -> usize {
        if self.per_head_calibrators {
            self.heads
        } else {
            1
        }
    }

    /// SASRec-style backbone: absolute positions, no calibrators.
    pub fn baseline(mut self) -> Self {
        self.position_mode = PositionMode::Absolute;
        self.spatial_enabled = false;
        self.adversarial_enabled = false;
        self.order_enabled = false;
        self.distance_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.d == 0 {
            problems.push("d: must be >= 1".to_string());
        }
        if self.heads == 0 {
            problems.push("heads: must be >= 1".to_string());
        } else if self.d % self.heads != 0 {
            problems.push(format!("d: {} not divisible by heads {}", self.d, self.heads));
        }
        if self.n == 0 {
            problems.push("n: must be >= 1".to_string());
        }
        if self.layers == 0 {
            problems.push("L: must be >= 1".to_string());
        }
        if self.inner == 0 {
            problems.push("inner: must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout: {} outside [0, 1)", self.dropout));
        }
        if self.alpha < 0.0 {
            problems.push(format!("alpha: {} is negative", self.alpha));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Everything a run needs: model plus paths, optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Early-stopping patience in epochs; 0 trains the full budget.
    pub patience: usize,
    pub precision: Precision,
    /// Evaluation worker threads (1 keeps runs bit-reproducible).
    pub workers: usize,
    /// Optional global gradient-norm cap.
    pub grad_clip: Option<f64>,
    /// Update the two parameter groups on alternating epochs instead of
    /// simultaneously.
    pub alternating: bool,
    /// k-core threshold used by preprocessing.
    pub min_count: usize,
    /// Cutoffs for ranking metrics.
    pub eval_ks: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoint"),
            report_dir: default_report_root(),
            seed: 42,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            patience: 10,
            precision: Precision::F32,
            workers: 1,
            grad_clip: None,
            alternating: false,
            min_count: 5,
            eval_ks: vec![10, 20],
        }
    }
}

/// Report root: `ACREC_REPORT_ROOT` when set, `reports` otherwise.
pub fn default_report_root() -> PathBuf {
    std::env::var_os("ACREC_REPORT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("reports"))
}

impl RunConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = match self.model.validate() {
            Ok(()) => Vec::new(),
            Err(ConfigError::Invalid(p)) => p,
            Err(other) => return Err(other),
        };
        if self.batch_size == 0 {
            problems.push("batch_size: must be >= 1".to_string());
        }
        if self.learning_rate <= 0.0 {
            problems.push(format!("learning_rate: {} must be > 0", self.learning_rate));
        }
        if self.workers == 0 {
            problems.push("workers: must be >= 1".to_string());
        }
        if self.min_count == 0 {
            problems.push("min_count: must be >= 1".to_string());
        }
        if self.eval_ks.is_empty() {
            problems.push("eval_ks: need at least one cutoff".to_string());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                problems.push(format!("grad_clip: {c} must be > 0"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus_key": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        let err =
            serde_json::from_str::<ModelConfig>(r#"{"d": 8, "made_up": true}"#).unwrap_err();
        assert!(err.to_string().contains("made_up"));
    }

    #[test]
    fn validation_enumerates_every_offending_key() {
        let mut cfg = RunConfig {
            batch_size: 0,
            learning_rate: -1.0,
            ..RunConfig::default()
        };
        cfg.model.d = 5;
        cfg.model.heads = 2;
        cfg.model.dropout = 1.5;
        let err = cfg.validate().unwrap_err();
        let ConfigError::Invalid(problems) = err else {
            panic!("expected Invalid");
        };
        let text = problems.join("\n");
        for key in ["d:", "dropout:", "batch_size:", "learning_rate:"] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn layer_field_serializes_as_upper_l() {
        let json = serde_json::to_value(ModelConfig::default()).unwrap();
        assert!(json.get("L").is_some());
    }
}
