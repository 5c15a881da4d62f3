//! Run-file schemas for the CLI commands and the shared TOML loader.
//! Configs are single structured text files; parse errors carry line
//! numbers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::FitConfig;
use crate::model::ModelSpec;
use crate::simulation::{GridConfig, StudyConfig};

/// `simulate` command: draw one dataset from a fully pinned model on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub grid: GridConfig,
    pub model: ModelSpec,
    pub seed: u64,
}

/// `fit` command: the model to fit plus optimizer/plan settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFileConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub fit: FitConfig,
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| {
        Error::Config(format!("{}: {}", path.display(), e))
    })
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a study config and validates it.
pub fn load_study(path: &Path) -> Result<StudyConfig> {
    let cfg: StudyConfig = load_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parse_error_carries_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"[grid]\nnx = 4\nny = 4\nnt = \"oops\"\ns1_range = [0.0, 1.0]\ns2_range = [0.0, 1.0]\nt_range = [0.0, 1.0]\n\n[model]\nkernel = \"separable\"\n[model.warp]\ntemporal = { kind = \"identity\" }\nseed = 1\n").unwrap();
        let err = load_toml::<SimulateConfig>(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn fit_config_defaults_apply() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"[model]\nkernel = \"separable\"\n[model.warp]\ntemporal = { kind = \"identity\" }\n").unwrap();
        let cfg: FitFileConfig = load_toml(f.path()).unwrap();
        assert_eq!(cfg.fit.m, 50);
        assert_eq!(cfg.fit.max_iters, 500);
    }
}
