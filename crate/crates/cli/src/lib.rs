//! Command implementations for the `precm` binary.
//!
//! Every command is a plain library function, so integration tests can drive
//! the full behavior in-process. The binary in `main.rs` only parses flags,
//! calls into these modules, prints, and maps errors to exit codes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use precm_core::tensor::{argmax_channels, threshold_labels};
use precm_core::{Error, LabelMap, NetConfig, Result, Tensor};

pub mod evalcmd;
pub mod law;
pub mod netaudit;
pub mod plan;
pub mod trainer;

/// Everything one experiment needs: the network, the data recipe, the
/// optimizer settings, and the evaluation angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Recipe for the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub classes: u8,
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Evaluation angles: fixed degrees plus a count of seeded random angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub angles: Vec<f64>,
    pub random_angle_count: usize,
}

impl RunConfig {
    /// Reads and validates a run configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Rejects configurations that cannot produce a meaningful run.
    pub fn validate(&self) -> Result<()> {
        if self.net.input_size != self.data.size {
            return Err(Error::InvalidConfig(format!(
                "network input size {} does not match data size {}",
                self.net.input_size, self.data.size
            )));
        }
        if self.net.input_channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "generated images are single-channel, but the network expects {}",
                self.net.input_channels
            )));
        }
        if self.data.count == 0 {
            return Err(Error::InvalidConfig(
                "a run needs at least one sample".to_string(),
            ));
        }
        if self.train.batch == 0 {
            return Err(Error::InvalidConfig(
                "batch size must be at least 1".to_string(),
            ));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {}",
                self.train.lr
            )));
        }
        if !self.train.momentum.is_finite()
            || self.train.momentum < 0.0
            || self.train.momentum >= 1.0
        {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.train.momentum
            )));
        }
        if self.eval.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidConfig(
                "evaluation angles must be finite".to_string(),
            ));
        }
        Ok(())
    }
}

/// Maps an error to the process exit code: 2 for an infeasible padding plan,
/// 4 for I/O failures, 1 for everything else (usage, schema, bad data).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InfeasiblePadding { .. }
        | Error::EmptyOutput { .. }
        | Error::PaddingBeyondReach { .. } => 2,
        Error::Io(_) => 4,
        _ => 1,
    }
}

/// Turns one batch entry of a prediction into a label map: single-channel
/// outputs threshold at one half, multi-channel outputs take the argmax.
pub fn prediction_labels(pred: &Tensor<f64>, b: usize) -> LabelMap {
    if pred.shape().channels == 1 {
        threshold_labels(pred, b, 0.5)
    } else {
        argmax_channels(pred, b)
    }
}
