//! Exact GP regression: marginal-likelihood training and closed-form
//! prediction. Inference costs O(n^3), which keeps this family practical
//! up to roughly ten thousand points.

use ndarray::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{log_median_distance, KernelParams};
use crate::linalg::{self, CholFactor, SymMatrix};
use crate::opt::{self, DifferentiableObjective, GroupKind, ParamLayout, TraceEntry, TrainConfig};
use crate::{GaussianPrediction, PredictSpace};

/// Practical size limit for exact inference.
pub const EXACT_GP_CAP: usize = 10_000;

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Exact GP model with cached factorization of `K + rho^2 I` and weights
/// `alpha = (K + rho^2 I)^{-1} y`. Caches are rebuilt on construction, so
/// they always match the stored hyperparameters.
#[derive(Debug, Clone)]
pub struct ExactGp {
    kernel: KernelParams,
    log_noise: f64,
    x: Array2<f64>,
    y: Array1<f64>,
    factor: CholFactor,
    alpha: Array1<f64>,
}

/// Gradient of the negative log marginal likelihood.
#[derive(Debug, Clone)]
pub struct ExactGpGrads {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: f64,
}

/// Options for [`ExactGp::fit_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactFitOptions {
    /// Use one lengthscale per input dimension instead of a shared one.
    pub ard: bool,
    /// Skip the [`EXACT_GP_CAP`] size check.
    pub allow_oversize: bool,
}

impl ExactGp {
    /// Builds the model and its caches. Fails if `K + rho^2 I` cannot be
    /// factorized even after jitter escalation.
    pub fn new(
        kernel: KernelParams,
        log_noise: f64,
        x: Array2<f64>,
        y: Array1<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: y.len(),
            });
        }
        if n == 0 {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        let (factor, alpha) = Self::build_caches(&kernel, log_noise, &x, &y)?;
        Ok(ExactGp {
            kernel,
            log_noise,
            x,
            y,
            factor,
            alpha,
        })
    }

    fn build_caches(
        kernel: &KernelParams,
        log_noise: f64,
        x: &Array2<f64>,
        y: &Array1<f64>,
    ) -> Result<(CholFactor, Array1<f64>)> {
        let noise = log_noise.exp();
        let mut shifted = kernel.matrix_sym(x)?.into_array();
        for i in 0..x.nrows() {
            shifted[[i, i]] += noise;
        }
        let sym = SymMatrix::from_lower(shifted)?;
        let factor = linalg::cholesky(&sym, linalg::default_jitter(&sym))?;
        let alpha = linalg::tri_solve_vec(&factor, y)?;
        Ok((factor, alpha))
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn log_noise(&self) -> f64 {
        self.log_noise
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn train_inputs(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn train_targets(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Negative log marginal likelihood:
    /// `1/2 y^T alpha + 1/2 log|K + rho^2 I| + n/2 log(2 pi)`.
    pub fn nll(&self) -> f64 {
        let n = self.n() as f64;
        0.5 * self.y.dot(&self.alpha) + 0.5 * linalg::logdet(&self.factor) + 0.5 * n * LN_2PI
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        -self.nll()
    }

    /// Negative log marginal likelihood and its gradient via the trace
    /// identity `d nll / d theta = 1/2 tr((K^{-1} - alpha alpha^T) dK)`.
    pub fn nll_with_grads(&self) -> Result<(f64, ExactGpGrads)> {
        let value = self.nll();
        let kinv = self.factor.inverse();
        let kgrads = self.kernel.grads(&self.x, &self.x)?;

        // <W, M> with W = K^{-1} - alpha alpha^T, without forming W.
        let weighted = |m: &Array2<f64>| -> f64 {
            let tr_kinv_m = kinv.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>();
            let am = m.dot(&self.alpha);
            0.5 * (tr_kinv_m - self.alpha.dot(&am))
        };

        let g_variance = weighted(&kgrads.wrt_log_variance);
        let g_lengthscales: Vec<f64> = kgrads.wrt_log_lengthscales.iter().map(weighted).collect();
        // dK/d log rho^2 = rho^2 I.
        let noise = self.noise_variance();
        let tr_kinv = kinv.diag().sum();
        let g_noise = 0.5 * noise * (tr_kinv - self.alpha.dot(&self.alpha));

        Ok((
            value,
            ExactGpGrads {
                log_variance: g_variance,
                log_lengthscales: g_lengthscales,
                log_noise: g_noise,
            },
        ))
    }

    /// Predictive mean and variance per row of `xs`:
    /// `mu = K_*f alpha`, `sigma^2 = k_** - K_*f (K + rho^2 I)^{-1} K_f*`,
    /// plus the noise variance in observation space.
    pub fn predict(
        &self,
        xs: &Array2<f64>,
        space: PredictSpace,
    ) -> Result<Vec<GaussianPrediction>> {
        if xs.ncols() != self.x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "test inputs have {} columns, training inputs {}",
                xs.ncols(),
                self.x.ncols()
            )));
        }
        let k_star = self.kernel.matrix(&self.x, xs)?; // n x n*
        let mean = k_star.t().dot(&self.alpha);
        let v = self.factor.solve_lower(&k_star); // n x n*
        let gamma = self.kernel.variance();
        let noise = match space {
            PredictSpace::Latent => 0.0,
            PredictSpace::Observation => self.noise_variance(),
        };
        let preds = mean
            .iter()
            .enumerate()
            .map(|(j, &mu)| {
                let explained: f64 = v.column(j).iter().map(|b| b * b).sum();
                GaussianPrediction {
                    mean: mu,
                    variance: (gamma - explained).max(0.0) + noise,
                }
            })
            .collect();
        Ok(preds)
    }

    /// Fits hyperparameters by minimizing the negative log marginal
    /// likelihood. Rejects datasets above [`EXACT_GP_CAP`] points.
    pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<(ExactGp, Vec<TraceEntry>)> {
        Self::fit_with(data, config, ExactFitOptions::default())
    }

    pub fn fit_with(
        data: &Dataset,
        config: &TrainConfig,
        options: ExactFitOptions,
    ) -> Result<(ExactGp, Vec<TraceEntry>)> {
        let n = data.n();
        if n == 0 {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        if !options.allow_oversize && n > EXACT_GP_CAP {
            return Err(Error::TooManyPoints {
                n,
                cap: EXACT_GP_CAP,
            });
        }
        let objective = ExactGpObjective {
            x: &data.x,
            y: &data.y,
            ard: options.ard,
        };
        let x0 = initial_params(data, options.ard);
        let result = opt::minimize(&objective, &x0, config)?;
        let (kernel, log_noise) = objective.decode(&result.x);
        let model = ExactGp::new(kernel, log_noise, data.x.clone(), data.y.clone())?;
        Ok((model, result.trace))
    }
}

fn initial_params(data: &Dataset, ard: bool) -> Vec<f64> {
    let log_ls = log_median_distance(&data.x);
    let n = data.n() as f64;
    let mean = data.y.sum() / n;
    let var = data.y.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let log_noise = (0.1 * var).max(1e-6).ln();
    let mut p = vec![0.0];
    let d = if ard { data.dim() } else { 1 };
    p.extend(std::iter::repeat(log_ls).take(d));
    p.push(log_noise);
    p
}

/// The exact-GP marginal likelihood as a differentiable objective over
/// `[log gamma, log sigma.., log rho^2]`.
pub struct ExactGpObjective<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a Array1<f64>,
    pub ard: bool,
}

impl ExactGpObjective<'_> {
    fn n_lengthscales(&self) -> usize {
        if self.ard {
            self.x.ncols()
        } else {
            1
        }
    }

    /// Splits a flat parameter vector into kernel params and log-noise.
    pub fn decode(&self, params: &[f64]) -> (KernelParams, f64) {
        let d = self.n_lengthscales();
        let kernel = KernelParams {
            log_variance: params[0],
            log_lengthscales: params[1..1 + d].to_vec(),
        };
        (kernel, params[1 + d])
    }
}

impl DifferentiableObjective for ExactGpObjective<'_> {
    fn dim(&self) -> usize {
        2 + self.n_lengthscales()
    }

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        layout.push_scalar("log_variance");
        layout.push(
            "log_lengthscales",
            1,
            self.n_lengthscales(),
            GroupKind::Plain,
        );
        layout.push_scalar("log_noise");
        layout
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (kernel, log_noise) = self.decode(params);
        let model = ExactGp::new(kernel, log_noise, self.x.clone(), self.y.clone())?;
        let (value, grads) = model.nll_with_grads()?;
        let mut g = vec![grads.log_variance];
        g.extend(grads.log_lengthscales);
        g.push(grads.log_noise);
        Ok((value, g))
    }
}
