//! Versioned JSON persistence for fitted models. Arrays are stored in
//! plain decimal (shortest round-trip representation), so files are
//! human-inspectable and reloading reproduces parameters bit for bit.

use std::fs;
use std::path::Path;

use deepgp::data::Transform;
use deepgp::dgp::{DgpLayer, DgpModel, MeanFn};
use deepgp::exact::ExactGp;
use deepgp::fitc::FitcModel;
use deepgp::kernels::KernelParams;
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Newest artifact format this build can read and write.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        MatrixData {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> CliResult<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| CliError::Data(format!("bad matrix shape in model file: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFnData {
    Zero,
    Linear { weights: MatrixData },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerData {
    pub width: usize,
    pub kernel: KernelParams,
    pub inducing: MatrixData,
    /// Whitened variational means, one column per unit.
    pub vmean_white: MatrixData,
    /// Raw whitened covariance factors (strict lower + log-diagonal).
    pub sfactor_white: Vec<MatrixData>,
    pub mean_fn: MeanFnData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelData {
    Exact {
        kernel: KernelParams,
        log_noise: f64,
        train_x: MatrixData,
        train_y: Vec<f64>,
    },
    Fitc {
        kernel: KernelParams,
        log_noise: f64,
        inducing: MatrixData,
        train_x: MatrixData,
        train_y: Vec<f64>,
    },
    Dgp {
        layers: Vec<LayerData>,
        log_noise: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub steps: usize,
    pub final_objective: f64,
    /// Architecture summary, e.g. "dgp L=3 D=5 m=300".
    pub architecture: String,
}

/// Self-describing model file: format version, family, every parameter,
/// the fitted preprocessing chain, and training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub family: String,
    /// CSV columns the model was trained on, in order.
    pub feature_names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub metadata: TrainMetadata,
    pub model: ModelData,
}

impl ModelArtifact {
    pub fn save(&self, path: impl AsRef<Path>) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Numeric(format!("serialization failed: {e}")))?;
        fs::write(path.as_ref(), json).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| CliError::Data(e.to_string()))?;
        // Check the version before committing to the full schema, so a
        // newer file fails with a clear message instead of a parse error.
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("not a model file: {e}")))?;
        if probe.format_version > FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "model file format version {} is newer than the supported version {}",
                probe.format_version, FORMAT_VERSION
            )));
        }
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("malformed model file: {e}")))
    }
}

pub fn mean_fn_to_data(mean: &MeanFn) -> MeanFnData {
    match mean {
        MeanFn::Zero => MeanFnData::Zero,
        MeanFn::Linear(w) => MeanFnData::Linear {
            weights: MatrixData::from_array(w),
        },
    }
}

pub fn mean_fn_from_data(data: &MeanFnData) -> CliResult<MeanFn> {
    Ok(match data {
        MeanFnData::Zero => MeanFn::Zero,
        MeanFnData::Linear { weights } => MeanFn::Linear(weights.to_array()?),
    })
}

pub fn exact_to_data(model: &ExactGp) -> ModelData {
    ModelData::Exact {
        kernel: model.kernel().clone(),
        log_noise: model.log_noise(),
        train_x: MatrixData::from_array(model.train_inputs()),
        train_y: model.train_targets().to_vec(),
    }
}

pub fn fitc_to_data(model: &FitcModel, train_x: &Array2<f64>, train_y: &Array1<f64>) -> ModelData {
    ModelData::Fitc {
        kernel: model.kernel().clone(),
        log_noise: model.log_noise(),
        inducing: MatrixData::from_array(model.inducing()),
        train_x: MatrixData::from_array(train_x),
        train_y: train_y.to_vec(),
    }
}

pub fn dgp_to_data(model: &DgpModel) -> ModelData {
    ModelData::Dgp {
        layers: model
            .layers
            .iter()
            .map(|l| LayerData {
                width: l.width,
                kernel: l.kernel.clone(),
                inducing: MatrixData::from_array(&l.z),
                vmean_white: MatrixData::from_array(&l.vmean),
                sfactor_white: l.sfactor_raw.iter().map(MatrixData::from_array).collect(),
                mean_fn: mean_fn_to_data(&l.mean_fn),
            })
            .collect(),
        log_noise: model.log_noise,
    }
}

/// Reconstructed model ready to predict.
pub enum LoadedModel {
    Exact(ExactGp),
    Fitc(FitcModel),
    Dgp(DgpModel),
}

pub fn rebuild(data: &ModelData) -> CliResult<LoadedModel> {
    match data {
        ModelData::Exact {
            kernel,
            log_noise,
            train_x,
            train_y,
        } => {
            let model = ExactGp::new(
                kernel.clone(),
                *log_noise,
                train_x.to_array()?,
                Array1::from_vec(train_y.clone()),
            )
            .map_err(CliError::from_core)?;
            Ok(LoadedModel::Exact(model))
        }
        ModelData::Fitc {
            kernel,
            log_noise,
            inducing,
            train_x,
            train_y,
        } => {
            let model = FitcModel::new(
                kernel.clone(),
                *log_noise,
                inducing.to_array()?,
                train_x.to_array()?,
                Array1::from_vec(train_y.clone()),
            )
            .map_err(CliError::from_core)?;
            Ok(LoadedModel::Fitc(model))
        }
        ModelData::Dgp { layers, log_noise } => {
            let mut built = Vec::with_capacity(layers.len());
            for l in layers {
                let sfactor_raw = l
                    .sfactor_white
                    .iter()
                    .map(|m| m.to_array())
                    .collect::<CliResult<Vec<_>>>()?;
                built.push(DgpLayer {
                    width: l.width,
                    kernel: l.kernel.clone(),
                    z: l.inducing.to_array()?,
                    vmean: l.vmean_white.to_array()?,
                    sfactor_raw,
                    mean_fn: mean_fn_from_data(&l.mean_fn)?,
                });
            }
            let model = DgpModel {
                layers: built,
                log_noise: *log_noise,
            };
            model.validate().map_err(CliError::from_core)?;
            Ok(LoadedModel::Dgp(model))
        }
    }
}
