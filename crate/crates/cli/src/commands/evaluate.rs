//! `evaluate`: join predictions with ground truth on row ids, emit a
//! metrics JSON (including the calibration report) and a partitioned
//! error table CSV.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use deepgp::eval::{calibration_report, mae_with_se, partitioned_mae, rmse, scaled_residuals};
use deepgp::GaussianPrediction;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub struct EvaluateArgs<'a> {
    pub predictions: &'a Path,
    pub truth: &'a Path,
    pub metrics_out: &'a Path,
    pub tables_out: &'a Path,
    /// Target column of the truth file.
    pub target_column: String,
    /// Optional label column of the truth file.
    pub label_column: Option<String>,
}

#[derive(Serialize)]
struct MetricsReport {
    n: usize,
    rmse: f64,
    mae: f64,
    mae_se: f64,
    mean_zeta: f64,
    sd_zeta: f64,
    calibration: deepgp::eval::CalibrationReport,
}

pub fn run(args: &EvaluateArgs) -> CliResult<()> {
    let preds = read_predictions(args.predictions)?;
    let truth = read_truth(args.truth, &args.target_column, args.label_column.as_deref())?;

    // Align on row ids; every prediction needs a truth row and vice versa.
    if preds.len() != truth.len() {
        return Err(CliError::Data(format!(
            "{} predictions vs {} truth rows",
            preds.len(),
            truth.len()
        )));
    }
    let mut aligned: Vec<(GaussianPrediction, f64, String)> = Vec::with_capacity(preds.len());
    for (row_id, pred) in &preds {
        let (t, label) = truth.get(row_id).ok_or_else(|| {
            CliError::Data(format!("row_id {row_id} missing from the truth file"))
        })?;
        aligned.push((*pred, *t, label.clone()));
    }

    let means: Vec<f64> = aligned.iter().map(|(p, _, _)| p.mean).collect();
    let ys: Vec<f64> = aligned.iter().map(|(_, t, _)| *t).collect();
    let labels: Vec<String> = aligned.iter().map(|(_, _, l)| l.clone()).collect();
    let gaussians: Vec<GaussianPrediction> = aligned.iter().map(|(p, _, _)| *p).collect();

    let rmse_v = rmse(&means, &ys).map_err(CliError::from_core)?;
    let (mae, mae_se) = mae_with_se(&means, &ys).map_err(CliError::from_core)?;
    let zeta = scaled_residuals(&gaussians, &ys).map_err(CliError::from_core)?;
    let calibration = calibration_report(&zeta).map_err(CliError::from_core)?;

    let report = MetricsReport {
        n: means.len(),
        rmse: rmse_v,
        mae,
        mae_se,
        mean_zeta: zeta.mean(),
        sd_zeta: zeta.sd(),
        calibration,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    std::fs::write(args.metrics_out, json).map_err(|e| CliError::Data(e.to_string()))?;

    let rows = partitioned_mae(&means, &ys, &labels).map_err(CliError::from_core)?;
    let mut table =
        std::fs::File::create(args.tables_out).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(table, "label,mae,se,n").map_err(|e| CliError::Data(e.to_string()))?;
    for r in &rows {
        writeln!(table, "{},{},{},{}", r.label, r.mae, r.se, r.n)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }

    println!(
        "n={} rmse={:.6} mae={:.6} (se {:.6}) zeta mean={:.4} sd={:.4}",
        report.n, report.rmse, report.mae, report.mae_se, report.mean_zeta, report.sd_zeta
    );
    Ok(())
}

/// Predictions CSV: `row_id,mean,variance,stddev`. The stddev column is
/// the sigma used for scaled residuals.
fn read_predictions(path: &Path) -> CliResult<Vec<(u64, GaussianPrediction)>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("predictions file missing column '{name}'")))
    };
    let (c_id, c_mean, c_std) = (col("row_id")?, col("mean")?, col("stddev")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        let get = |c: usize| -> CliResult<f64> {
            record
                .get(c)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Data("unparsable prediction row".into()))
        };
        let id = get(c_id)? as u64;
        let stddev = get(c_std)?;
        out.push((
            id,
            GaussianPrediction {
                mean: get(c_mean)?,
                variance: stddev * stddev,
            },
        ));
    }
    if out.is_empty() {
        return Err(CliError::Data("predictions file has no rows".into()));
    }
    Ok(out)
}

fn read_truth(
    path: &Path,
    target_column: &str,
    label_column: Option<&str>,
) -> CliResult<HashMap<u64, (f64, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("truth file missing column '{name}'")))
    };
    let c_id = col("row_id")?;
    let c_t = col(target_column)?;
    let c_label = match label_column {
        Some(l) => Some(col(l)?),
        None => None,
    };
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        let id = record
            .get(c_id)
            .and_then(|f| f.trim().parse::<f64>().ok())
            .ok_or_else(|| CliError::Data("unparsable truth row_id".into()))? as u64;
        let t = record
            .get(c_t)
            .and_then(|f| f.trim().parse::<f64>().ok())
            .ok_or_else(|| CliError::Data("unparsable truth target".into()))?;
        let label = c_label
            .and_then(|c| record.get(c))
            .unwrap_or("")
            .trim()
            .to_string();
        if out.insert(id, (t, label)).is_some() {
            return Err(CliError::Data(format!("duplicate row_id {id} in truth")));
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("truth file has no rows".into()));
    }
    Ok(out)
}
