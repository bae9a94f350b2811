//! `train`: fit a model from a declarative config, persist it, and write
//! the training trace.

use std::io::Write;
use std::path::Path;

use deepgp::data::{fit_pca, fit_standardize, ingest_csv, CsvSchema, Dataset, Transform};
use deepgp::dgp::{dgp_fit, DgpArchitecture};
use deepgp::exact::{ExactFitOptions, ExactGp};
use deepgp::fitc::FitcModel;
use deepgp::opt::TraceEntry;
use log::info;

use crate::artifact::{self, ModelArtifact, TrainMetadata, FORMAT_VERSION};
use crate::config::{Family, RunConfig};
use crate::error::{CliError, CliResult};

pub fn run(config_path: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config_path)?;

    let schema = CsvSchema {
        features: cfg.data.features.clone(),
        target: cfg.data.target.clone(),
        label: cfg.data.label.clone(),
        delimiter: cfg.data.delimiter,
    };
    let report = ingest_csv(&cfg.data.path, &schema).map_err(CliError::from_core)?;
    if report.rejected_rows > 0 {
        info!(
            "rejected {} rows with non-finite values",
            report.rejected_rows
        );
    }
    let dataset = report.dataset;
    info!("loaded {} rows x {} features", dataset.n(), dataset.dim());

    // Standardize always; optionally project onto principal components.
    let standardizer = fit_standardize(&dataset).map_err(CliError::from_core)?;
    let mut transforms = vec![Transform::Standardize(standardizer.clone())];
    let mut processed = standardizer.apply(&dataset);
    if let Some(k) = cfg.preprocess.pca {
        let pca = fit_pca(&processed, k).map_err(CliError::from_core)?;
        processed = pca.apply(&processed);
        transforms.push(Transform::Pca(pca));
    }

    let (model_data, trace, architecture) = fit_family(&cfg, &processed)?;

    let final_objective = trace.last().map(|t| t.objective).unwrap_or(f64::NAN);
    let artifact = ModelArtifact {
        format_version: FORMAT_VERSION,
        family: cfg.model.family.name().to_string(),
        feature_names: dataset.feature_names.clone(),
        transforms,
        metadata: TrainMetadata {
            seed: cfg.train.seed,
            steps: trace.last().map(|t| t.step).unwrap_or(0),
            final_objective,
            architecture: architecture.clone(),
        },
        model: model_data,
    };

    write_trace(&cfg, &trace)?;
    artifact.save(&cfg.output.model)?;
    println!(
        "trained {architecture}; final objective {final_objective:.6}; model written to {}",
        cfg.output.model.display()
    );
    Ok(())
}

fn fit_family(
    cfg: &RunConfig,
    data: &Dataset,
) -> CliResult<(artifact::ModelData, Vec<TraceEntry>, String)> {
    match cfg.model.family {
        Family::Exact => {
            let options = ExactFitOptions {
                ard: cfg.model.ard,
                allow_oversize: cfg.model.allow_oversize,
            };
            let (model, trace) =
                ExactGp::fit_with(data, &cfg.train, options).map_err(CliError::from_core)?;
            let arch = format!("exact n={}", data.n());
            Ok((artifact::exact_to_data(&model), trace, arch))
        }
        Family::Fitc => {
            let m = cfg.inducing().min(data.n());
            let (model, trace) =
                FitcModel::fit(data, m, &cfg.train).map_err(CliError::from_core)?;
            let arch = format!("fitc m={m}");
            Ok((
                artifact::fitc_to_data(&model, &data.x, &data.y),
                trace,
                arch,
            ))
        }
        Family::Svgp => {
            let m = cfg.inducing();
            let arch_spec = DgpArchitecture::svgp(m);
            let (model, trace) =
                dgp_fit(data, &arch_spec, &cfg.train).map_err(CliError::from_core)?;
            let arch = format!("svgp m={m}");
            Ok((artifact::dgp_to_data(&model), trace, arch))
        }
        Family::Dgp => {
            let layers = cfg.model.layers.unwrap_or(2);
            let width = cfg.hidden_width();
            let m = cfg.inducing();
            let arch_spec = DgpArchitecture::uniform(layers, width, m);
            let (model, trace) =
                dgp_fit(data, &arch_spec, &cfg.train).map_err(CliError::from_core)?;
            let arch = format!("dgp L={layers} D={width} m={m}");
            Ok((artifact::dgp_to_data(&model), trace, arch))
        }
    }
}

fn write_trace(cfg: &RunConfig, trace: &[TraceEntry]) -> CliResult<()> {
    let mut file =
        std::fs::File::create(&cfg.output.trace).map_err(|e| CliError::Data(e.to_string()))?;
    let objective_name = match cfg.model.family {
        Family::Svgp | Family::Dgp => "elbo",
        _ => "objective",
    };
    writeln!(file, "step,{objective_name},wall_ms").map_err(|e| CliError::Data(e.to_string()))?;
    for t in trace {
        writeln!(file, "{},{},{}", t.step, t.objective, t.wall_ms)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}
