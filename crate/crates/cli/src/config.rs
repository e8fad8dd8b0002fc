use std::fs;
use std::path::{Path, PathBuf};

use fewshot::evaluation::EvalProtocol;
use fewshot::models::ModelConfig;
use fewshot::training::TrainConfig;
use fewshot::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// FSDS file with the base, validation and novel splits.
    pub path: Option<PathBuf>,
    /// Optional FSDS file whose base split supplies unlabeled images.
    pub unlabeled: Option<PathBuf>,
}

/// Everything a run depends on. Written back out with every default filled
/// in as `effective_config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
