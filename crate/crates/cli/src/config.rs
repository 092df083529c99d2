use std::path::{Path, PathBuf};

use geocycle::data::SyntheticDatasetConfig;
use geocycle::eval::EvalConfig;
use geocycle::train::{ModelConfig, TrainConfig};
use geocycle::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_FILE: &str = "resolved.toml";
pub const OUTPUT_ROOT_ENV: &str = "GEOCYCLE_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.json`.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticDatasetConfig,
}

/// The TOML run configuration. Every key has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved config into `dir`, creating it.
    pub fn dump(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `--out` if given, else `<$GEOCYCLE_OUTPUT_ROOT or ./runs>/<name>`.
pub fn output_dir(flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfigFile::default();
        assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfigFile::parse("[train]\nepochz = 3\n").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = RunConfigFile::parse("[model.patch]\nwidth = 3\n").unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfigFile::parse("[train]\nepochs = 10\n[model.patch]\nbase_width = 8\n").unwrap();
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.model.patch.base_width, 8);
        assert_eq!(c.model.patch.stride2_layers, 3);
    }

    #[test]
    fn loss_network_provider_is_selectable() {
        let c = RunConfigFile::parse("[model.loss_network]\nprovider = \"fixed-random\"\nseed = 4\n").unwrap();
        assert_eq!(c.model.loss_network.provider.name(), "fixed-random");
        assert!(RunConfigFile::parse("[model.loss_network]\nprovider = \"fixed-random\"\nsed = 4\n").is_err());
    }
}
