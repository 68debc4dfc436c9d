//! The run configuration file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use anapred::dataset::PreprocessSpec;
use anapred::model::ModelConfig;
use anapred::phantom::PhantomRanges;
use anapred::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory used when `--data` is not given.
    pub data: Option<PathBuf>,
    /// Output directory used when `--out` is not given.
    pub out: Option<PathBuf>,
}

/// Everything a pipeline run needs, in one JSON document. Input selection
/// lives in `train.input`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomRanges,
    pub preprocess: PreprocessSpec,
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

/// Marks errors that come from the configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check =
            |r: anapred::Result<()>, what: &str| r.map_err(|e| ConfigError(format!("{what}: {e}")));
        check(self.phantom.validate(), "phantom")?;
        check(self.model.validate(), "model")?;
        check(self.train.validate(), "train")?;
        let s = &self.split;
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9
            || s.train < 0.0
            || s.val < 0.0
            || s.test < 0.0
        {
            return Err(ConfigError(format!(
                "split fractions must be non-negative and sum to 1, got {s:?}"
            ))
            .into());
        }
        Ok(())
    }

    pub fn data_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.data.clone())
            .ok_or_else(|| {
                ConfigError("no corpus directory: pass --data or set paths.data".into()).into()
            })
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.out.clone())
            .ok_or_else(|| {
                ConfigError("no output directory: pass --out or set paths.out".into()).into()
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        cfg.validate().unwrap();
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.embed_dim, 96);
    }
}
