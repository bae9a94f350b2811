//! Declarative run configuration (TOML) for training and benchmarks.

use std::path::{Path, PathBuf};

use deepgp::opt::TrainConfig;
use deepgp::synth;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub path: PathBuf,
    pub target: String,
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub delimiter: Option<char>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exact,
    Fitc,
    Svgp,
    Dgp,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Exact => "exact",
            Family::Fitc => "fitc",
            Family::Svgp => "svgp",
            Family::Dgp => "dgp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub family: Family,
    /// Inducing points per layer (fitc, svgp, dgp).
    #[serde(default)]
    pub inducing: Option<usize>,
    /// Total layers (dgp only).
    #[serde(default)]
    pub layers: Option<usize>,
    /// Hidden units per hidden layer (dgp only).
    #[serde(default)]
    pub hidden_width: Option<usize>,
    /// Per-dimension lengthscales (exact only).
    #[serde(default)]
    pub ard: bool,
    /// Lift the exact-GP training-size cap.
    #[serde(default)]
    pub allow_oversize: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PreprocessSection {
    /// Project standardized features onto this many principal components.
    #[serde(default)]
    pub pca: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    pub model: PathBuf,
    pub trace: PathBuf,
}

/// The `train` command's declarative configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default = "TrainConfig::default")]
    pub train: TrainConfig,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{e}")))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Family/architecture consistency: exact carries no inducing set,
    /// svgp is single-layer, dgp needs depth.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        match m.family {
            Family::Exact => {
                if m.inducing.is_some() || m.layers.is_some() || m.hidden_width.is_some() {
                    return Err(CliError::Config(
                        "family 'exact' takes no inducing/layers/hidden_width".into(),
                    ));
                }
            }
            Family::Fitc => {
                if m.layers.is_some() || m.hidden_width.is_some() {
                    return Err(CliError::Config(
                        "family 'fitc' takes no layers/hidden_width".into(),
                    ));
                }
            }
            Family::Svgp => {
                if let Some(l) = m.layers {
                    if l != 1 {
                        return Err(CliError::Config(format!(
                            "family 'svgp' is single-layer, got layers = {l}"
                        )));
                    }
                }
            }
            Family::Dgp => {
                if m.layers.unwrap_or(0) < 1 {
                    return Err(CliError::Config(
                        "family 'dgp' needs layers >= 1".into(),
                    ));
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Inducing count with the defaults: 300 per layer unless configured.
    pub fn inducing(&self) -> usize {
        self.model.inducing.unwrap_or(300)
    }

    /// Hidden width with the default of 5 units per hidden layer.
    pub fn hidden_width(&self) -> usize {
        self.model.hidden_width.unwrap_or(5)
    }
}

/// Benchmark spec file: generator specs, model columns, repetitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkFile {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub specs: Vec<synth::BenchmarkSpec>,
    pub models: Vec<BenchmarkModel>,
}

fn default_repetitions() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkModel {
    pub id: String,
    pub family: Family,
    #[serde(default)]
    pub inducing: Option<usize>,
    #[serde(default)]
    pub layers: Option<usize>,
    #[serde(default)]
    pub hidden_width: Option<usize>,
    /// Exact-GP fit subsample size.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default = "TrainConfig::default")]
    pub train: TrainConfig,
}

impl BenchmarkModel {
    pub fn to_model_config(&self) -> CliResult<synth::ModelConfig> {
        let family = match self.family {
            Family::Exact => synth::ModelFamily::Exact {
                subsample: self.subsample,
            },
            Family::Fitc => synth::ModelFamily::Fitc {
                inducing: self.inducing.unwrap_or(300),
            },
            Family::Svgp => synth::ModelFamily::Dgp {
                layers: 1,
                hidden_width: 1,
                inducing: self.inducing.unwrap_or(300),
            },
            Family::Dgp => synth::ModelFamily::Dgp {
                layers: self.layers.ok_or_else(|| {
                    CliError::Config(format!("benchmark model '{}' needs layers", self.id))
                })?,
                hidden_width: self.hidden_width.unwrap_or(5),
                inducing: self.inducing.unwrap_or(300),
            },
        };
        Ok(synth::ModelConfig::new(
            self.id.clone(),
            family,
            self.train.clone(),
        ))
    }
}

impl BenchmarkFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{e}")))?;
        let file: BenchmarkFile =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}")))?;
        if file.specs.is_empty() || file.models.is_empty() {
            return Err(CliError::Config(
                "benchmark file needs at least one spec and one model".into(),
            ));
        }
        Ok(file)
    }
}
