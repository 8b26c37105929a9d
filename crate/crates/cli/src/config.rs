//! Optional TOML file with per-module sections. Flags given on the command
//! line override values from the file.

use std::path::Path;

use odeformer_core::dataset::DatasetConfig;
use odeformer_core::evaluation::BenchmarkConfig;
use odeformer_core::inference::RefineConfig;
use odeformer_model::{DecodeConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub refine: RefineConfig,
    pub benchmark: BenchmarkConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}
