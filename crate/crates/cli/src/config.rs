use std::path::{Path, PathBuf};

use hsgcast_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Contents of a `train --config` file.
///
/// ```toml
/// data = "city"          # dataset directory
/// out = "runs/full"      # output directory
///
/// [train]                # any TrainConfig field; omitted keys keep defaults
/// d = 16
/// history = 24
/// horizon = 6
/// ablations = ["no-macro-disc"]
/// ```
///
/// Unknown keys at either level are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
