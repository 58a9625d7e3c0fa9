//! Experiment configuration file.

use std::path::{Path, PathBuf};

use fas_gnn::baselines::GridSpec;
use fas_gnn::training::TrainConfig;
use fas_gnn::{ArchConfig, Split, SystemConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "FASGNN_OUT";
pub const DEFAULT_OUT: &str = "fasgnn-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub architecture: ArchConfig,
    pub training: TrainConfig,
    pub split: SplitConfig,
    pub grid: GridConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.9,
            validation: 0.05,
        }
    }
}

impl SplitConfig {
    pub fn split(&self, size: usize) -> Split {
        Split::fractions(size, self.train, self.validation)
    }
}

/// Grid-search resolution; mirrors [`GridSpec`] with a TOML-sized budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub alpha_points: usize,
    pub power_points: usize,
    pub position_points: usize,
    pub budget: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            alpha_points: g.alpha_points,
            power_points: g.power_points,
            position_points: g.position_points,
            budget: g.budget as u64,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            alpha_points: self.alpha_points,
            power_points: self.power_points,
            position_points: self.position_points,
            budget: self.budget as u128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: fas_gnn::FasError| CliError::Config(e.to_string());
        self.system.validate().map_err(invalid)?;
        self.architecture.validate().map_err(invalid)?;
        self.training.validate().map_err(invalid)?;
        self.grid.spec().validate().map_err(invalid)?;
        let s = &self.split;
        if !(s.train > 0.0 && s.validation > 0.0 && s.train + s.validation <= 1.0) {
            return Err(CliError::Config(format!(
                "split fractions {} and {} are invalid",
                s.train, s.validation
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML encoding.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// `--out` flag, then the environment, then the config file.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ENV) {
            return PathBuf::from(p);
        }
        self.paths
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Serialize)]
struct Stamp<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    system_hash: String,
}

#[derive(Serialize)]
struct Resolved<'a> {
    stamp: Stamp<'a>,
    #[serde(flatten)]
    config: &'a ExperimentConfig,
}

/// Writes `resolved_config.toml` with a provenance stamp into `dir`.
pub fn write_resolved(
    cfg: &ExperimentConfig,
    command: &str,
    dir: &Path,
) -> Result<PathBuf, CliError> {
    let resolved = Resolved {
        stamp: Stamp {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash_hex(),
            system_hash: cfg.system.hash_hex(),
        },
        config: cfg,
    };
    let path = dir.join("resolved_config.toml");
    let text = toml::to_string(&resolved).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[system]\nantennas = 4\n").is_err());
        assert!(ExperimentConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn encoding_round_trips() {
        let cfg = ExperimentConfig {
            system: SystemConfig::reference(8, 4),
            training: TrainConfig::desk(),
            ..Default::default()
        };
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash_hex(), cfg.hash_hex());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/desk.toml"),
            include_str!("../../../configs/reference.toml"),
        ] {
            ExperimentConfig::parse(text).unwrap();
        }
    }
}
