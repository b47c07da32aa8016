//! Run configuration: model geometry plus the training knobs.

use fusedet::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Everything a run needs. The defaults are the published parameter
/// settings: batch size 4, 30 epochs, learning rate 5e-5, weight decay
/// 1e-7, Adam; the model defaults carry dropout 0.5 and the 0.5/0.4
/// confidence/NMS thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps; `None` runs all epochs.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            batch_size: 4,
            epochs: 30,
            learning_rate: 5e-5,
            weight_decay: 1e-7,
            seed: 0,
            max_steps: None,
        }
    }
}

impl RunConfig {
    /// Small-model counterpart for desk-scale runs.
    pub fn toy(num_class: usize) -> Self {
        RunConfig { model: ModelConfig::toy(num_class), ..RunConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be positive".to_string()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(CliError::Usage("epochs must be positive without max_steps".to_string()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CliError::Usage(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CliError::Usage(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Loads JSON from a file when given, else the defaults.
    pub fn from_file(path: Option<&std::path::Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("{}: {}", p.display(), e)))?;
                serde_json::from_str(&raw)
                    .map_err(|e| CliError::Usage(format!("{}: {}", p.display(), e)))
            }
        }
    }

    /// Applies one `path=value` override. The path is dot-separated into
    /// the JSON document (`learning_rate=1e-3`, `model.dropout=0`,
    /// `model.text_enabled=false`); the value is parsed as JSON, falling
    /// back to a bare string so enum variants need no quoting.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw_value) = assignment.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("override {:?} is not of the form key=value", assignment))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw_value)
            .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));

        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| CliError::Usage(format!("unknown config key {:?}", path)))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| CliError::Usage(format!("override {:?}: {}", assignment, e)))?;
        Ok(())
    }
}
