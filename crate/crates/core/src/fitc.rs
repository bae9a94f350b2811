//! FITC sparse GP regression. The prior over training latents is replaced
//! by a low-rank-plus-diagonal approximation
//! `Q_ff + diag(K_ff - Q_ff)` with `Q_ab = K_au K_uu^{-1} K_ub`, after
//! which inference is exact. Marginalizing the observation model leaves
//! `Q_ff + diag(K_ff - Q_ff) + rho^2 I` to invert, which the Woodbury
//! identity handles in O(n m^2) without ever forming an n x n matrix.

use ndarray::prelude::*;

use crate::data::{kmeans_centers, Dataset};
use crate::error::{Error, Result};
use crate::exact::LN_2PI;
use crate::kernels::{log_median_distance, KernelParams};
use crate::linalg::{self, CholFactor, SymMatrix};
use crate::opt::{self, DifferentiableObjective, GroupKind, ParamLayout, TraceEntry, TrainConfig};
use crate::tape::{rbf_matrix, Tape, Var};
use crate::{GaussianPrediction, PredictSpace};

/// FITC model with cached factors for prediction.
#[derive(Debug, Clone)]
pub struct FitcModel {
    kernel: KernelParams,
    log_noise: f64,
    z: Array2<f64>,
    x: Array2<f64>,
    y: Array1<f64>,
    cache: PredictCache,
}

/// Factors of the training-set system reused by every prediction:
/// `A = K_uu + K_uf Lambda^{-1} K_fu` with
/// `Lambda = diag(K_ff - Q_ff) + rho^2 I`.
#[derive(Debug, Clone)]
struct PredictCache {
    factor_kuu: CholFactor,
    factor_a: CholFactor,
    /// `A^{-1} K_uf Lambda^{-1} y`.
    mean_coeff: Array1<f64>,
}

impl FitcModel {
    pub fn new(
        kernel: KernelParams,
        log_noise: f64,
        z: Array2<f64>,
        x: Array2<f64>,
        y: Array1<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        if y.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: y.len(),
            });
        }
        if z.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "inducing locations have {} columns, inputs {}",
                z.ncols(),
                x.ncols()
            )));
        }
        let cache = Self::build_cache(&kernel, log_noise, &z, &x, &y)?;
        Ok(FitcModel {
            kernel,
            log_noise,
            z,
            x,
            y,
            cache,
        })
    }

    fn build_cache(
        kernel: &KernelParams,
        log_noise: f64,
        z: &Array2<f64>,
        x: &Array2<f64>,
        y: &Array1<f64>,
    ) -> Result<PredictCache> {
        let kuu = kernel.matrix_sym(z)?;
        let factor_kuu = linalg::cholesky(&kuu, linalg::default_jitter(&kuu))?;
        let k_ux = kernel.matrix(z, x)?; // m x n
        let lambda = Self::lambda(kernel, log_noise, &factor_kuu, &k_ux);

        let scaled = &k_ux / &lambda.view().insert_axis(Axis(0)); // K_uf Lambda^{-1}
        let a = SymMatrix::from_lower(kuu.as_array() + &scaled.dot(&k_ux.t()))?;
        let factor_a = linalg::cholesky(&a, linalg::default_jitter(&a))?;

        let rhs = scaled.dot(y);
        let mean_coeff = linalg::tri_solve_vec(&factor_a, &rhs)?;
        Ok(PredictCache {
            factor_kuu,
            factor_a,
            mean_coeff,
        })
    }

    /// `Lambda_i = max(k_ii - q_ii, 0) + rho^2`, the FITC diagonal.
    fn lambda(
        kernel: &KernelParams,
        log_noise: f64,
        factor_kuu: &CholFactor,
        k_ux: &Array2<f64>,
    ) -> Array1<f64> {
        let noise = log_noise.exp();
        let gamma = kernel.variance();
        let b = factor_kuu.solve_lower(k_ux); // m x n
        let q_diag = b.mapv(|v| v * v).sum_axis(Axis(0));
        q_diag.mapv(|q| (gamma - q).max(0.0) + noise)
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

    pub fn inducing(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    /// Negative log marginal likelihood of the approximated model,
    /// evaluated in O(n m^2). This is the tape forward pass of
    /// [`FitcObjective`], so the trained objective and this value agree
    /// exactly.
    pub fn nll(&self) -> Result<f64> {
        let (tape, out, _) = nll_tape(&self.kernel, self.log_noise, &self.z, &self.x, &self.y)?;
        Ok(tape.scalar_value(out))
    }

    /// Negative log marginal likelihood and gradients with respect to all
    /// hyperparameters and the inducing locations.
    pub fn nll_with_grads(&self) -> Result<(f64, FitcGrads)> {
        let (tape, out, leaves) =
            nll_tape(&self.kernel, self.log_noise, &self.z, &self.x, &self.y)?;
        let value = tape.scalar_value(out);
        let grads = tape.backward(out);
        let d = self.kernel.log_lengthscales.len();
        Ok((
            value,
            FitcGrads {
                log_variance: grads.get(leaves.log_variance, (1, 1))[[0, 0]],
                log_lengthscales: grads
                    .get(leaves.log_lengthscales, (1, d))
                    .into_raw_vec_and_offset()
                    .0,
                log_noise: grads.get(leaves.log_noise, (1, 1))[[0, 0]],
                z: grads.get(leaves.z, self.z.dim()),
            },
        ))
    }

    /// Predictive mean and variance at `xs`:
    /// `mu = K_*u A^{-1} K_uf Lambda^{-1} y` and
    /// `sigma^2 = k_** - K_*u (K_uu^{-1} - A^{-1}) K_u*`,
    /// the Woodbury form of the approximated model's exact predictor.
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
        let k_us = self.kernel.matrix(&self.z, xs)?; // m x n*
        let mean = k_us.t().dot(&self.cache.mean_coeff);
        let v1 = self.cache.factor_kuu.solve_lower(&k_us);
        let v2 = self.cache.factor_a.solve_lower(&k_us);
        let gamma = self.kernel.variance();
        let noise = match space {
            PredictSpace::Latent => 0.0,
            PredictSpace::Observation => self.noise_variance(),
        };
        Ok(mean
            .iter()
            .enumerate()
            .map(|(j, &mu)| {
                let sub: f64 = v1.column(j).iter().map(|b| b * b).sum();
                let add: f64 = v2.column(j).iter().map(|b| b * b).sum();
                GaussianPrediction {
                    mean: mu,
                    variance: (gamma - sub + add).max(0.0) + noise,
                }
            })
            .collect())
    }

    /// Jointly optimizes kernel hyperparameters, noise, and inducing
    /// locations by maximizing the approximate marginal likelihood.
    /// Inducing locations start at k-means++ centers of the inputs.
    pub fn fit(
        data: &Dataset,
        m: usize,
        config: &TrainConfig,
    ) -> Result<(FitcModel, Vec<TraceEntry>)> {
        let n = data.n();
        if n < 1 {
            return Err(Error::TooFewPoints { needed: 1, got: n });
        }
        if m < 1 || m > n {
            return Err(Error::ArchitectureInvalid(format!(
                "inducing count m = {m} must satisfy 1 <= m <= n = {n}"
            )));
        }
        let z0 = kmeans_centers(&data.x, m, config.seed);
        let objective = FitcObjective {
            x: &data.x,
            y: &data.y,
            m: z0.nrows(),
            ard: false,
        };
        let mut x0 = {
            let n_mean = data.y.sum() / n as f64;
            let var = data.y.mapv(|v| (v - n_mean) * (v - n_mean)).sum() / n as f64;
            vec![0.0, log_median_distance(&data.x), (0.1 * var).max(1e-6).ln()]
        };
        x0.extend(z0.iter());
        let result = opt::minimize(&objective, &x0, config)?;
        let (kernel, log_noise, z) = objective.decode(&result.x);
        let model = FitcModel::new(kernel, log_noise, z, data.x.clone(), data.y.clone())?;
        Ok((model, result.trace))
    }
}

/// Gradient of the FITC negative log marginal likelihood.
#[derive(Debug, Clone)]
pub struct FitcGrads {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: f64,
    pub z: Array2<f64>,
}

struct NllLeaves {
    log_variance: Var,
    log_lengthscales: Var,
    log_noise: Var,
    z: Var,
}

/// Records the FITC negative log marginal likelihood on a tape:
/// determinant lemma for the log-determinant and the Woodbury identity for
/// the quadratic form, both O(n m^2).
fn nll_tape(
    kernel: &KernelParams,
    log_noise: f64,
    z: &Array2<f64>,
    x: &Array2<f64>,
    y: &Array1<f64>,
) -> Result<(Tape, Var, NllLeaves)> {
    let n = x.nrows();
    let mut t = Tape::new();
    let lv = t.leaf_scalar(kernel.log_variance);
    let ll = t.leaf(
        Array2::from_shape_vec((1, kernel.log_lengthscales.len()), kernel.log_lengthscales.clone())
            .expect("lengthscale row"),
    );
    let ln_v = t.leaf_scalar(log_noise);
    let zv = t.leaf(z.clone());
    let xv = t.constant(x.clone());
    let yv = t.constant(y.view().insert_axis(Axis(1)).to_owned());

    let base_jitter = 1e-8 * kernel.variance();
    let kuu = rbf_matrix(&mut t, lv, ll, zv, zv);
    let l_uu = t.chol(kuu, base_jitter)?;
    let k_ux = rbf_matrix(&mut t, lv, ll, zv, xv); // m x n

    // Lambda = max(gamma - diag(Q_ff), 0) + rho^2 as an n x 1 column.
    let b = t.tri_solve_lower(l_uu, k_ux);
    let q_diag = {
        let sq = t.square(b);
        let cs = t.col_sums(sq);
        t.transpose(cs)
    };
    let gamma = t.exp(lv);
    let noise = t.exp(ln_v);
    let lambda = {
        let d = t.sub(gamma, q_diag);
        let d = t.clamp_min(d, 0.0);
        t.add(d, noise)
    };

    // A = K_uu + K_ux Lambda^{-1} K_xu.
    let inv_lambda_row = {
        let one = t.constant_scalar(1.0);
        let inv = t.div(one, lambda);
        t.transpose(inv)
    };
    let scaled = t.mul(k_ux, inv_lambda_row);
    let a = {
        let cross = {
            let k_xu = t.transpose(k_ux);
            t.matmul(scaled, k_xu)
        };
        t.add(kuu, cross)
    };
    let l_a = t.chol(a, base_jitter)?;

    // log|Sigma| = log|A| - log|K_uu| + sum(log Lambda).
    let logdet = {
        let sum_log = |t: &mut Tape, l: Var| {
            let d = t.diag(l);
            let ld = t.ln(d);
            let s = t.sum_all(ld);
            t.scale(s, 2.0)
        };
        let ld_a = sum_log(&mut t, l_a);
        let ld_uu = sum_log(&mut t, l_uu);
        let ln_lambda = {
            let ll = t.ln(lambda);
            t.sum_all(ll)
        };
        let diff = t.sub(ld_a, ld_uu);
        t.add(diff, ln_lambda)
    };

    // y^T Sigma^{-1} y = y^T Lambda^{-1} y - ||L_A^{-1} K_ux Lambda^{-1} y||^2.
    let quad = {
        let y_scaled = {
            let inv_col = t.transpose(inv_lambda_row);
            t.mul(yv, inv_col)
        };
        let direct = {
            let prod = t.mul(yv, y_scaled);
            t.sum_all(prod)
        };
        let r = t.matmul(k_ux, y_scaled);
        let w = t.tri_solve_lower(l_a, r);
        let explained = {
            let sq = t.square(w);
            t.sum_all(sq)
        };
        t.sub(direct, explained)
    };

    let nll = {
        let s = t.add(quad, logdet);
        let c = t.add_const(s, n as f64 * LN_2PI);
        t.scale(c, 0.5)
    };

    Ok((
        t,
        nll,
        NllLeaves {
            log_variance: lv,
            log_lengthscales: ll,
            log_noise: ln_v,
            z: zv,
        },
    ))
}

/// FITC marginal likelihood as a differentiable objective over
/// `[log gamma, log sigma.., log rho^2, Z]`.
pub struct FitcObjective<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a Array1<f64>,
    pub m: usize,
    pub ard: bool,
}

impl FitcObjective<'_> {
    fn n_lengthscales(&self) -> usize {
        if self.ard {
            self.x.ncols()
        } else {
            1
        }
    }

    pub fn decode(&self, params: &[f64]) -> (KernelParams, f64, Array2<f64>) {
        let d = self.n_lengthscales();
        let kernel = KernelParams {
            log_variance: params[0],
            log_lengthscales: params[1..1 + d].to_vec(),
        };
        let log_noise = params[1 + d];
        let z = Array2::from_shape_vec((self.m, self.x.ncols()), params[2 + d..].to_vec())
            .expect("inducing segment shape");
        (kernel, log_noise, z)
    }

    pub fn encode(kernel: &KernelParams, log_noise: f64, z: &Array2<f64>) -> Vec<f64> {
        let mut p = vec![kernel.log_variance];
        p.extend(&kernel.log_lengthscales);
        p.push(log_noise);
        p.extend(z.iter());
        p
    }
}

impl DifferentiableObjective for FitcObjective<'_> {
    fn dim(&self) -> usize {
        2 + self.n_lengthscales() + self.m * self.x.ncols()
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
        layout.push("z", self.m, self.x.ncols(), GroupKind::Plain);
        layout
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (kernel, log_noise, z) = self.decode(params);
        let (tape, out, leaves) = nll_tape(&kernel, log_noise, &z, self.x, self.y)?;
        let value = tape.scalar_value(out);
        let grads = tape.backward(out);
        let mut g = vec![grads.get(leaves.log_variance, (1, 1))[[0, 0]]];
        g.extend(
            grads
                .get(leaves.log_lengthscales, (1, self.n_lengthscales()))
                .iter(),
        );
        g.push(grads.get(leaves.log_noise, (1, 1))[[0, 0]]);
        g.extend(grads.get(leaves.z, z.dim()).iter());
        Ok((value, g))
    }
}
