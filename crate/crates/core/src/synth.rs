//! Synthetic benchmark generators with known ground truth: exact GP draws
//! (hyperparameters recoverable, calibration testable) and hierarchical
//! composite functions whose flat regions and sharp transitions defeat
//! stationary shallow models, plus a benchmark runner that sweeps
//! (generator, model, repetition) cells into a results table.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{fit_standardize, Dataset};
use crate::dgp::{dgp_fit, dgp_predict, DgpArchitecture};
use crate::error::{Error, Result};
use crate::eval;
use crate::exact::{ExactFitOptions, ExactGp};
use crate::fitc::FitcModel;
use crate::kernels::KernelParams;
use crate::linalg;
use crate::opt::TrainConfig;
use crate::{GaussianPrediction, PredictSpace};

/// Largest train + test size an exact joint draw will factorize.
pub const EXACT_DRAW_CAP: usize = 5000;

/// Kernel hyperparameters every GP-draw benchmark uses (recorded in the
/// generated truth metadata).
pub const GP_DRAW_LOG_VARIANCE: f64 = 0.0;
pub const GP_DRAW_LOG_LENGTHSCALE: f64 = -0.6931471805599453; // ln 0.5

/// Sawtooth warp frequency of the step-composite benchmark.
const STEP_TEETH: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    GpDraw,
    StepComposite,
    WarpedGp,
}

impl BenchmarkKind {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkKind::GpDraw => "gp_draw",
            BenchmarkKind::StepComposite => "step_composite",
            BenchmarkKind::WarpedGp => "warped_gp",
        }
    }
}

/// What to generate: kind, input dimensionality, observation noise, sizes,
/// and the seed every random choice derives from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    pub dimensions: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn id(&self) -> String {
        format!(
            "{}_{}d_n{}_s{}",
            self.kind.name(),
            self.dimensions,
            self.n_train,
            self.seed
        )
    }

    fn validate(&self) -> Result<()> {
        if self.dimensions == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::ArchitectureInvalid(
                "benchmark sizes and dimensions must be positive".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::ArchitectureInvalid(
                "noise level must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth recorded with a generated benchmark. The Bayes-optimal
/// test RMSE is the noise standard deviation for every kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TruthInfo {
    GpDraw {
        log_variance: f64,
        log_lengthscale: f64,
        noise_sd: f64,
    },
    /// Closed-form generator; see [`step_composite_value`].
    Closed { noise_sd: f64 },
    WarpedDraw {
        log_variance: f64,
        log_lengthscale: f64,
        noise_sd: f64,
    },
}

impl TruthInfo {
    pub fn noise_sd(&self) -> f64 {
        match self {
            TruthInfo::GpDraw { noise_sd, .. }
            | TruthInfo::Closed { noise_sd }
            | TruthInfo::WarpedDraw { noise_sd, .. } => *noise_sd,
        }
    }
}

/// A generated benchmark: train/test datasets plus truth metadata.
#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: TruthInfo,
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Generated> {
    spec.validate()?;
    match spec.kind {
        BenchmarkKind::GpDraw => gen_gp_draw(spec),
        BenchmarkKind::StepComposite => Ok(gen_step_composite(spec)),
        BenchmarkKind::WarpedGp => gen_warped_gp(spec),
    }
}

/// Draws latent function values jointly over `points` from a GP with the
/// given kernel, deduplicating identical rows so equal inputs always get
/// equal function values.
fn joint_gp_draw(
    points: &Array2<f64>,
    kernel: &KernelParams,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f64>> {
    let n = points.nrows();
    let mut unique_rows: Vec<usize> = Vec::new();
    let mut assignment = vec![0usize; n];
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for i in 0..n {
        let key: Vec<u64> = points.row(i).iter().map(|v| v.to_bits()).collect();
        match seen.get(&key) {
            Some(&u) => assignment[i] = u,
            None => {
                let u = unique_rows.len();
                seen.insert(key, u);
                unique_rows.push(i);
                assignment[i] = u;
            }
        }
    }
    let xu = points.select(Axis(0), &unique_rows);
    let k = kernel.matrix_sym(&xu)?;
    let f = linalg::cholesky(&k, linalg::default_jitter(&k))?;
    let eps = Array1::from_shape_fn(xu.nrows(), |_| StandardNormal.sample(rng));
    let fu = f.lower().dot(&eps);
    Ok(Array1::from_shape_fn(n, |i| fu[assignment[i]]))
}

/// Exact draw from a GP with the recorded hyperparameters over the joint
/// train and test inputs.
pub fn gen_gp_draw(spec: &BenchmarkSpec) -> Result<Generated> {
    let total = spec.n_train + spec.n_test;
    if total > EXACT_DRAW_CAP {
        return Err(Error::SizeTooLargeForExactDraw {
            total,
            cap: EXACT_DRAW_CAP,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // A wide domain relative to the lengthscale gives the draw many
    // independent patches, so hyperparameters are identifiable from a
    // single draw.
    let x = Array2::from_shape_fn((total, spec.dimensions), |_| rng.random_range(0.0..20.0));
    let kernel = KernelParams::isotropic(GP_DRAW_LOG_VARIANCE, GP_DRAW_LOG_LENGTHSCALE);
    let f = joint_gp_draw(&x, &kernel, &mut rng)?;
    let y = &f + &Array1::from_shape_fn(total, |_| spec.noise * rng.sample::<f64, _>(StandardNormal));

    let train = Dataset::from_xy(
        x.slice(s![..spec.n_train, ..]).to_owned(),
        y.slice(s![..spec.n_train]).to_owned(),
    )?;
    let test = Dataset::from_xy(
        x.slice(s![spec.n_train.., ..]).to_owned(),
        y.slice(s![spec.n_train..]).to_owned(),
    )?;
    Ok(Generated {
        train,
        test,
        truth: TruthInfo::GpDraw {
            log_variance: GP_DRAW_LOG_VARIANCE,
            log_lengthscale: GP_DRAW_LOG_LENGTHSCALE,
            noise_sd: spec.noise,
        },
    })
}

/// The step-composite target at one input row (noise-free):
/// a smooth function of a hard sawtooth warp of the averaged coordinate,
/// so the surface alternates flat stretches and sharp transitions that a
/// stationary kernel has to buy with one global lengthscale.
pub fn step_composite_value(row: ArrayView1<f64>) -> f64 {
    let u = row[0];
    let v = (u * STEP_TEETH).fract();
    (2.5 * std::f64::consts::PI * v).sin()
}

/// Composite-warp benchmark with a known closed form.
pub fn gen_step_composite(spec: &BenchmarkSpec) -> Generated {
    let total = spec.n_train + spec.n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Array2::from_shape_fn((total, spec.dimensions), |_| rng.random_range(0.0..1.0));
    let y = Array1::from_shape_fn(total, |i| {
        step_composite_value(x.row(i)) + spec.noise * rng.sample::<f64, _>(StandardNormal)
    });
    let train = Dataset::from_xy(
        x.slice(s![..spec.n_train, ..]).to_owned(),
        y.slice(s![..spec.n_train]).to_owned(),
    )
    .expect("sizes agree");
    let test = Dataset::from_xy(
        x.slice(s![spec.n_train.., ..]).to_owned(),
        y.slice(s![spec.n_train..]).to_owned(),
    )
    .expect("sizes agree");
    Generated {
        train,
        test,
        truth: TruthInfo::Closed {
            noise_sd: spec.noise,
        },
    }
}

/// Smooth monotone warp of the averaged coordinate feeding an exact GP
/// draw: nonstationary in the inputs but smooth, unlike the hard
/// step composite.
pub fn gen_warped_gp(spec: &BenchmarkSpec) -> Result<Generated> {
    let total = spec.n_train + spec.n_test;
    if total > EXACT_DRAW_CAP {
        return Err(Error::SizeTooLargeForExactDraw {
            total,
            cap: EXACT_DRAW_CAP,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Array2::from_shape_fn((total, spec.dimensions), |_| rng.random_range(0.0..1.0));
    let warped = Array2::from_shape_fn((total, 1), |(i, _)| {
        let u = x.row(i).sum() / spec.dimensions as f64;
        (4.0 * (u - 0.5)).tanh()
    });
    let kernel = KernelParams::isotropic(GP_DRAW_LOG_VARIANCE, (0.2f64).ln());
    let f = joint_gp_draw(&warped, &kernel, &mut rng)?;
    let y = &f + &Array1::from_shape_fn(total, |_| spec.noise * rng.sample::<f64, _>(StandardNormal));
    let train = Dataset::from_xy(
        x.slice(s![..spec.n_train, ..]).to_owned(),
        y.slice(s![..spec.n_train]).to_owned(),
    )?;
    let test = Dataset::from_xy(
        x.slice(s![spec.n_train.., ..]).to_owned(),
        y.slice(s![spec.n_train..]).to_owned(),
    )?;
    Ok(Generated {
        train,
        test,
        truth: TruthInfo::WarpedDraw {
            log_variance: GP_DRAW_LOG_VARIANCE,
            log_lengthscale: (0.2f64).ln(),
            noise_sd: spec.noise,
        },
    })
}

// ---------------------------------------------------------------------------
// Benchmark runner.

/// Model family entered into a benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    /// Exact GP, optionally fitted on a random subsample of the train set.
    Exact { subsample: Option<usize> },
    Fitc { inducing: usize },
    /// Deep GP; `layers = 1` is the SVGP sparse model.
    Dgp {
        layers: usize,
        hidden_width: usize,
        inducing: usize,
    },
}

/// One model column of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: String,
    #[serde(flatten)]
    pub family: ModelFamily,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn new(id: impl Into<String>, family: ModelFamily, train: TrainConfig) -> Self {
        ModelConfig {
            id: id.into(),
            family,
            train,
        }
    }
}

/// One (spec, model, repetition) cell of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub spec_id: String,
    pub model_id: String,
    pub rep: usize,
    pub rmse: f64,
    pub mae: f64,
    pub zeta_mean: f64,
    pub zeta_sd: f64,
    pub wall_ms: f64,
}

/// Per (spec, model) aggregate over repetitions: means with standard
/// errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub spec_id: String,
    pub model_id: String,
    pub reps: usize,
    pub rmse_mean: f64,
    pub rmse_se: f64,
    pub mae_mean: f64,
    pub mae_se: f64,
    pub zeta_sd_mean: f64,
    pub wall_ms_mean: f64,
}

/// Prediction samples used for deep models in benchmark cells.
const PREDICT_SAMPLES: usize = 200;

/// Fits one model on the (standardized) training set and returns
/// observation-space predictions in original target units.
pub fn fit_and_predict(
    model: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    rep: usize,
) -> Result<Vec<GaussianPrediction>> {
    let standardizer = fit_standardize(train)?;
    let train_std = standardizer.apply(train);
    let test_x_std = standardizer.apply_features(&test.x);

    let mut cfg = model.train.clone();
    cfg.seed = cfg.seed.wrapping_add(rep as u64).wrapping_mul(0x9E37_79B9);

    let preds_std: Vec<GaussianPrediction> = match &model.family {
        ModelFamily::Exact { subsample } => {
            let fit_data = match subsample {
                Some(k) if *k < train_std.n() => {
                    let mut idx: Vec<usize> = (0..train_std.n()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    idx.shuffle(&mut rng);
                    train_std.select(&idx[..*k])
                }
                _ => train_std.clone(),
            };
            let (gp, _) = ExactGp::fit_with(&fit_data, &cfg, ExactFitOptions::default())?;
            gp.predict(&test_x_std, PredictSpace::Observation)?
        }
        ModelFamily::Fitc { inducing } => {
            let (gp, _) = FitcModel::fit(&train_std, (*inducing).min(train_std.n()), &cfg)?;
            gp.predict(&test_x_std, PredictSpace::Observation)?
        }
        ModelFamily::Dgp {
            layers,
            hidden_width,
            inducing,
        } => {
            let arch = DgpArchitecture::uniform(*layers, *hidden_width, *inducing);
            let (gp, _) = dgp_fit(&train_std, &arch, &cfg)?;
            // One-layer mixtures have identical components, so one sample
            // suffices.
            let s = if gp.depth() == 1 { 1 } else { PREDICT_SAMPLES };
            let pred = dgp_predict(&gp, &test_x_std, s, cfg.seed)?;
            pred.collapsed(PredictSpace::Observation)
        }
    };

    Ok(preds_std
        .into_iter()
        .map(|p| GaussianPrediction {
            mean: standardizer.invert_target_mean(p.mean),
            variance: standardizer.invert_target_variance(p.variance),
        })
        .collect())
}

/// Runs every (spec, model, repetition) cell; the table is assembled in
/// loop order, so results are deterministic under the seed schedule.
pub fn run_benchmark(
    specs: &[BenchmarkSpec],
    models: &[ModelConfig],
    repetitions: usize,
) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::with_capacity(specs.len() * models.len() * repetitions);
    for spec in specs {
        for rep in 0..repetitions {
            let mut rep_spec = *spec;
            rep_spec.seed = spec.seed.wrapping_add(rep as u64);
            let generated = generate(&rep_spec)?;
            let truth: Vec<f64> = generated.test.y.to_vec();
            for model in models {
                let start = Instant::now();
                let preds = fit_and_predict(model, &generated.train, &generated.test, rep)?;
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
                let rmse = eval::rmse(&means, &truth)?;
                let (mae, _) = eval::mae_with_se(&means, &truth)?;
                let zeta = eval::scaled_residuals(&preds, &truth)?;
                rows.push(BenchmarkRow {
                    spec_id: spec.id(),
                    model_id: model.id.clone(),
                    rep,
                    rmse,
                    mae,
                    zeta_mean: zeta.mean(),
                    zeta_sd: zeta.sd(),
                    wall_ms,
                });
            }
        }
    }
    Ok(rows)
}

/// Means and standard errors per (spec, model), in first-appearance order.
pub fn aggregate(rows: &[BenchmarkRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut buckets: HashMap<(String, String), Vec<&BenchmarkRow>> = HashMap::new();
    for row in rows {
        let key = (row.spec_id.clone(), row.model_id.clone());
        if !buckets.contains_key(&key) {
            order.push(key.clone());
        }
        buckets.entry(key).or_default().push(row);
    }
    let mean_se = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt() / n.sqrt())
    };
    order
        .into_iter()
        .map(|key| {
            let group = &buckets[&key];
            let rmses: Vec<f64> = group.iter().map(|r| r.rmse).collect();
            let maes: Vec<f64> = group.iter().map(|r| r.mae).collect();
            let zsds: Vec<f64> = group.iter().map(|r| r.zeta_sd).collect();
            let walls: Vec<f64> = group.iter().map(|r| r.wall_ms).collect();
            let (rmse_mean, rmse_se) = mean_se(&rmses);
            let (mae_mean, mae_se) = mean_se(&maes);
            AggregateRow {
                spec_id: key.0,
                model_id: key.1,
                reps: group.len(),
                rmse_mean,
                rmse_se,
                mae_mean,
                mae_se,
                zeta_sd_mean: mean_se(&zsds).0,
                wall_ms_mean: mean_se(&walls).0,
            }
        })
        .collect()
}
