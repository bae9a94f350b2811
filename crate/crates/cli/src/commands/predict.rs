//! `predict`: load a model file, run it on a feature CSV, and write
//! per-row predictive means and variances in original target units.

use std::io::Write;
use std::path::Path;

use deepgp::data::Transform;
use deepgp::dgp::dgp_predict;
use deepgp::{GaussianPrediction, PredictSpace};
use ndarray::prelude::*;

use crate::artifact::{rebuild, LoadedModel, ModelArtifact};
use crate::error::{CliError, CliResult};

pub struct PredictArgs<'a> {
    pub model: &'a Path,
    pub input: &'a Path,
    pub output: &'a Path,
    pub samples: usize,
    pub seed: u64,
    pub latent: bool,
}

pub fn run(args: &PredictArgs) -> CliResult<()> {
    let artifact = ModelArtifact::load(args.model)?;
    let loaded = rebuild(&artifact.model)?;
    let x = read_features(args.input, &artifact.feature_names)?;
    let preds = predict(&artifact, &loaded, &x, args)?;
    write_predictions(args.output, &preds)?;
    println!(
        "wrote {} predictions to {}",
        preds.len(),
        args.output.display()
    );
    Ok(())
}

/// Predictions in original target units for already-loaded artifacts;
/// shared with the evaluate-style tooling and tests.
pub fn predict(
    artifact: &ModelArtifact,
    loaded: &LoadedModel,
    x_raw: &Array2<f64>,
    args: &PredictArgs,
) -> CliResult<Vec<GaussianPrediction>> {
    let mut x = x_raw.clone();
    for t in &artifact.transforms {
        x = t.apply_features(&x);
    }
    let space = if args.latent {
        PredictSpace::Latent
    } else {
        PredictSpace::Observation
    };
    let preds = match loaded {
        LoadedModel::Exact(m) => m.predict(&x, space).map_err(CliError::from_core)?,
        LoadedModel::Fitc(m) => m.predict(&x, space).map_err(CliError::from_core)?,
        LoadedModel::Dgp(m) => {
            let s = if m.depth() == 1 { 1 } else { args.samples };
            dgp_predict(m, &x, s, args.seed)
                .map_err(CliError::from_core)?
                .collapsed(space)
        }
    };
    // Back to original target units via the standardization step.
    let standardizer = artifact.transforms.iter().find_map(|t| match t {
        Transform::Standardize(s) => Some(s),
        Transform::Pca(_) => None,
    });
    Ok(match standardizer {
        Some(s) => preds
            .into_iter()
            .map(|p| GaussianPrediction {
                mean: s.invert_target_mean(p.mean),
                variance: s.invert_target_variance(p.variance),
            })
            .collect(),
        None => preds,
    })
}

/// Reads the model's feature columns from a headered CSV. Rows with
/// missing or non-finite features cannot be aligned, so they fail loudly.
pub fn read_features(path: &Path, feature_names: &[String]) -> CliResult<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols: Vec<usize> = feature_names
        .iter()
        .map(|f| {
            headers.iter().position(|h| h == f).ok_or_else(|| {
                CliError::Data(format!(
                    "input is missing feature column '{f}' the model was trained on"
                ))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        let mut row = Vec::with_capacity(cols.len());
        for &c in &cols {
            let v = record
                .get(c)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    CliError::Data(format!("row {i}: non-finite or unparsable feature value"))
                })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data("input file has no data rows".into()));
    }
    let mut x = Array2::zeros((rows.len(), cols.len()));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    Ok(x)
}

fn write_predictions(path: &Path, preds: &[GaussianPrediction]) -> CliResult<()> {
    let mut file = std::fs::File::create(path).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(file, "row_id,mean,variance,stddev").map_err(|e| CliError::Data(e.to_string()))?;
    for (i, p) in preds.iter().enumerate() {
        writeln!(file, "{},{},{},{}", i, p.mean, p.variance, p.stddev())
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}
