//! Metrics and calibration diagnostics: RMSE, MAE with standard errors,
//! partitioned error tables, scaled residuals, and kernel density
//! estimates against the standard normal reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::GaussianPrediction;

const SQRT_2PI: f64 = 2.5066282746310002;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute error and its standard error `sd(|err|) / sqrt(n)`.
pub fn mae_with_se(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_lengths(pred.len(), truth.len())?;
    let n = pred.len() as f64;
    let abs_errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let mae = abs_errs.iter().sum::<f64>() / n;
    let var = abs_errs.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n;
    Ok((mae, var.sqrt() / n.sqrt()))
}

/// One row of a partitioned error table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRow {
    pub label: String,
    pub mae: f64,
    pub se: f64,
    pub n: usize,
}

/// Per-label MAE with standard errors, rows in lexicographic label order,
/// followed by a `Total` row over everything. Empty labels count under
/// `unlabeled`.
pub fn partitioned_mae(pred: &[f64], truth: &[f64], labels: &[String]) -> Result<Vec<PartitionRow>> {
    check_lengths(pred.len(), truth.len())?;
    check_lengths(pred.len(), labels.len())?;
    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, label) in labels.iter().enumerate() {
        let key = if label.is_empty() {
            "unlabeled".to_string()
        } else {
            label.clone()
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(groups.len() + 1);
    for (label, idx) in groups {
        let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
        let (mae, se) = mae_with_se(&p, &t)?;
        rows.push(PartitionRow {
            label,
            mae,
            se,
            n: idx.len(),
        });
    }
    let (mae, se) = mae_with_se(pred, truth)?;
    rows.push(PartitionRow {
        label: "Total".to_string(),
        mae,
        se,
        n: pred.len(),
    });
    Ok(rows)
}

/// Residuals scaled by the predictive standard deviation:
/// `zeta_i = (mu_i - y_i) / sigma_i`. Standard normal when the model is
/// calibrated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaledResiduals {
    pub values: Vec<f64>,
}

impl ScaledResiduals {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sd(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64)
            .sqrt()
    }
}

/// Computes scaled residuals from predictions (pass observation-space
/// predictions so the noise variance is included).
pub fn scaled_residuals(preds: &[GaussianPrediction], truth: &[f64]) -> Result<ScaledResiduals> {
    check_lengths(preds.len(), truth.len())?;
    let mut values = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.iter().zip(truth).enumerate() {
        if !(p.variance > 0.0) {
            return Err(Error::ZeroVariance { index: i });
        }
        values.push((p.mean - t) / p.variance.sqrt());
    }
    Ok(ScaledResiduals { values })
}

/// Kernel density estimate on a uniform grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Bandwidth choice for [`kde`].
#[derive(Debug, Clone, Copy)]
pub enum Bandwidth {
    /// `1.06 * sd * n^(-1/5)`.
    Auto,
    Fixed(f64),
}

/// Gaussian KDE of `samples` at `x` with bandwidth `h`.
pub fn kde_density_at(samples: &[f64], h: f64, x: f64) -> f64 {
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|s| {
            let z = (x - s) / h;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        / (n * h * SQRT_2PI)
}

const KDE_GRID_POINTS: usize = 512;

/// Gaussian-kernel density estimate on a uniform grid spanning the data
/// range widened by five bandwidths on each side.
pub fn kde(samples: &[f64], bandwidth: Bandwidth) -> Result<KdeCurve> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: 0,
        });
    }
    let n = samples.len() as f64;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::DimensionMismatch(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        Bandwidth::Auto => {
            if samples.len() < 2 {
                return Err(Error::TooFewSamples {
                    needed: 2,
                    got: samples.len(),
                });
            }
            let mean = samples.iter().sum::<f64>() / n;
            let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if sd == 0.0 {
                return Err(Error::TooFewSamples {
                    needed: 2,
                    got: 1,
                });
            }
            1.06 * sd * n.powf(-0.2)
        }
    };
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + i as f64 * step).collect();
    let density: Vec<f64> = grid.iter().map(|&x| kde_density_at(samples, h, x)).collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// Standard normal density evaluated on the same grid as `curve`.
pub fn normal_reference(curve: &KdeCurve) -> KdeCurve {
    let density = curve
        .grid
        .iter()
        .map(|&x| (-0.5 * x * x).exp() / SQRT_2PI)
        .collect();
    KdeCurve {
        grid: curve.grid.clone(),
        density,
        bandwidth: 0.0,
    }
}

/// Calibration summary: scaled-residual moments plus the KDE and its
/// standard-normal reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_zeta: f64,
    pub sd_zeta: f64,
    pub kde_grid: Vec<f64>,
    pub kde_density: Vec<f64>,
    pub kde_bandwidth: f64,
    pub reference_density: Vec<f64>,
}

pub fn calibration_report(residuals: &ScaledResiduals) -> Result<CalibrationReport> {
    let curve = kde(&residuals.values, Bandwidth::Auto)?;
    let reference = normal_reference(&curve);
    Ok(CalibrationReport {
        mean_zeta: residuals.mean(),
        sd_zeta: residuals.sd(),
        kde_grid: curve.grid,
        kde_density: curve.density,
        kde_bandwidth: curve.bandwidth,
        reference_density: reference.density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn rmse_and_mae_identical_vectors() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(rmse(&v, &v).unwrap(), 0.0);
        let (mae, se) = mae_with_se(&v, &v).unwrap();
        assert_eq!(mae, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn rmse_hand_computed() {
        let pred = vec![0.0, 0.0];
        let truth = vec![3.0, 4.0];
        assert_abs_diff_eq!(rmse(&pred, &truth).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
        let (mae, _) = mae_with_se(&pred, &truth).unwrap();
        assert_abs_diff_eq!(mae, 3.5, epsilon = 1e-12);
    }

    #[test]
    fn mae_single_pair() {
        let (mae, se) = mae_with_se(&[1.0], &[3.0]).unwrap();
        assert_abs_diff_eq!(mae, 2.0, epsilon = 0.0);
        assert_abs_diff_eq!(se, 0.0, epsilon = 0.0);
    }

    #[test]
    fn errors_on_mismatch_and_empty() {
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(rmse(&[], &[]), Err(Error::Empty)));
    }

    #[test]
    fn partitioned_single_label_equals_total() {
        let pred = vec![1.0, 2.0, 3.0];
        let truth = vec![1.5, 1.5, 2.0];
        let labels = vec!["a".to_string(); 3];
        let rows = partitioned_mae(&pred, &truth, &labels).unwrap();
        assert_eq!(rows.len(), 2);
        assert_abs_diff_eq!(rows[0].mae, rows[1].mae, epsilon = 0.0);
        assert_eq!(rows[1].label, "Total");
        assert_eq!(rows[1].n, 3);
    }

    #[test]
    fn partitioned_two_labels_direct_computation() {
        let pred = vec![1.0, 2.0, 10.0, 20.0];
        let truth = vec![0.0, 0.0, 0.0, 0.0];
        let labels = vec![
            "b".to_string(),
            "a".to_string(),
            "b".to_string(),
            "a".to_string(),
        ];
        let rows = partitioned_mae(&pred, &truth, &labels).unwrap();
        assert_eq!(rows[0].label, "a");
        assert_abs_diff_eq!(rows[0].mae, 11.0, epsilon = 1e-12); // (2 + 20) / 2
        assert_eq!(rows[1].label, "b");
        assert_abs_diff_eq!(rows[1].mae, 5.5, epsilon = 1e-12); // (1 + 10) / 2
        assert_eq!(rows[2].label, "Total");
        assert_abs_diff_eq!(rows[2].mae, 8.25, epsilon = 1e-12);
    }

    #[test]
    fn partitioned_empty_label_is_unlabeled() {
        let rows = partitioned_mae(
            &[1.0, 2.0],
            &[1.0, 2.0],
            &["".to_string(), "x".to_string()],
        )
        .unwrap();
        assert!(rows.iter().any(|r| r.label == "unlabeled"));
    }

    #[test]
    fn scaled_residuals_formula() {
        let preds = vec![GaussianPrediction {
            mean: 1.0,
            variance: 4.0,
        }];
        let z = scaled_residuals(&preds, &[0.0]).unwrap();
        assert_abs_diff_eq!(z.values[0], 0.5, epsilon = 0.0);
    }

    #[test]
    fn scaled_residuals_zero_when_perfect() {
        let preds: Vec<GaussianPrediction> = (0..5)
            .map(|i| GaussianPrediction {
                mean: i as f64,
                variance: 1.0,
            })
            .collect();
        let truth: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let z = scaled_residuals(&preds, &truth).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaled_residuals_rejects_zero_variance() {
        let preds = vec![GaussianPrediction {
            mean: 0.0,
            variance: 0.0,
        }];
        assert!(matches!(
            scaled_residuals(&preds, &[0.0]),
            Err(Error::ZeroVariance { index: 0 })
        ));
    }

    #[test]
    fn halving_sigma_doubles_zeta_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<GaussianPrediction> = (0..500)
            .map(|_| GaussianPrediction {
                mean: rng.random_range(-1.0..1.0),
                variance: rng.random_range(0.5..2.0),
            })
            .collect();
        let truth: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = scaled_residuals(&preds, &truth).unwrap();
        let halved: Vec<GaussianPrediction> = preds
            .iter()
            .map(|p| GaussianPrediction {
                mean: p.mean,
                variance: p.variance / 4.0, // sigma / 2
            })
            .collect();
        let tight = scaled_residuals(&halved, &truth).unwrap();
        assert_abs_diff_eq!(tight.sd(), 2.0 * base.sd(), epsilon = 1e-10);
    }

    #[test]
    fn kde_single_point_fixed_bandwidth() {
        let h = 0.37;
        let d = kde_density_at(&[0.0], h, 0.0);
        assert_abs_diff_eq!(d, 1.0 / (h * SQRT_2PI), epsilon = 1e-12);
    }

    #[test]
    fn kde_auto_bandwidth_formula() {
        // sd = 1, n = 1e5: h = 1.06 * 10^(-1).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        let curve = kde(&samples, Bandwidth::Auto).unwrap();
        let expected = 1.06 * sd * (samples.len() as f64).powf(-0.2);
        assert_abs_diff_eq!(curve.bandwidth, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(curve.bandwidth, 0.106, epsilon = 2e-3);
    }

    #[test]
    fn kde_close_to_normal_for_normal_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let curve = kde(&samples, Bandwidth::Auto).unwrap();
        let reference = normal_reference(&curve);
        let sup = curve
            .density
            .iter()
            .zip(reference.density.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup < 0.02, "sup distance {sup}");
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f64> = (0..2000).map(|_| rng.random_range(-2.0..2.0)).collect();
        let curve = kde(&samples, Bandwidth::Auto).unwrap();
        let mut integral = 0.0;
        for w in curve.grid.windows(2).zip(curve.density.windows(2)) {
            let (g, d) = w;
            integral += 0.5 * (d[0] + d[1]) * (g[1] - g[0]);
        }
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
        assert!(curve.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn kde_too_few_samples_for_auto() {
        assert!(matches!(
            kde(&[1.0], Bandwidth::Auto),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
