//! Run specs: one TOML file naming the model and training configuration.
//! Unknown keys are hard errors so recipe drift cannot pass silently.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::TrainConfig;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    /// Dataset selector (mnist | cifar10 | synthetic); CLI flags override.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub data_dir: Option<String>,
    /// Example counts for the synthetic dataset.
    #[serde(default)]
    pub train_examples: Option<usize>,
    #[serde(default)]
    pub eval_examples: Option<usize>,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn default_precision() -> Precision {
    Precision::F32
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<RunSpec, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let spec: RunSpec =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        spec.model.validate()?;
        spec.train.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}
