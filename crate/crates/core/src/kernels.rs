//! RBF covariance functions, isotropic or with per-dimension (ARD)
//! lengthscales, and their gradients with respect to the log-hyperparameters.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// RBF kernel hyperparameters, stored in log-space so unconstrained
/// optimizers preserve positivity:
/// `k(x, y) = gamma * exp(-1/2 * sum_d (x_d - y_d)^2 / sigma_d^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    /// Isotropic kernel: one lengthscale shared across all input dimensions.
    pub fn isotropic(log_variance: f64, log_lengthscale: f64) -> Self {
        KernelParams {
            log_variance,
            log_lengthscales: vec![log_lengthscale],
        }
    }

    /// ARD kernel with one lengthscale per input dimension.
    pub fn ard(log_variance: f64, log_lengthscales: Vec<f64>) -> Self {
        KernelParams {
            log_variance,
            log_lengthscales,
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn is_isotropic(&self) -> bool {
        self.log_lengthscales.len() == 1
    }

    fn check_dims(&self, d: usize) -> Result<()> {
        let l = self.log_lengthscales.len();
        if l != 1 && l != d {
            return Err(Error::DimensionMismatch(format!(
                "kernel has {} lengthscales but inputs have {} columns",
                l, d
            )));
        }
        Ok(())
    }

    /// Lengthscale applied to dimension `d` (broadcast when isotropic).
    fn lengthscale(&self, d: usize) -> f64 {
        if self.is_isotropic() {
            self.log_lengthscales[0].exp()
        } else {
            self.log_lengthscales[d].exp()
        }
    }

    /// Inputs scaled by the inverse lengthscales, so squared Euclidean
    /// distance in the scaled space is the kernel exponent (times 2).
    fn scale_inputs(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut s = x.to_owned();
        for d in 0..s.ncols() {
            let inv = 1.0 / self.lengthscale(d);
            s.column_mut(d).mapv_inplace(|v| v * inv);
        }
        s
    }

    /// Covariance matrix between the rows of `xa` and `xb`.
    ///
    /// When `xa` and `xb` are the same array, the result is built
    /// symmetrically with the diagonal set to `gamma` exactly.
    pub fn matrix(&self, xa: &Array2<f64>, xb: &Array2<f64>) -> Result<Array2<f64>> {
        if xa.ncols() != xb.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "xa has {} columns, xb has {}",
                xa.ncols(),
                xb.ncols()
            )));
        }
        self.check_dims(xa.ncols())?;
        if std::ptr::eq(xa, xb) {
            return Ok(self.matrix_sym(xa)?.into_array());
        }
        let sq = scaled_sqdist(
            &self.scale_inputs(&xa.view()).view(),
            &self.scale_inputs(&xb.view()).view(),
        );
        let gamma = self.variance();
        Ok(sq.mapv(|s| gamma * (-0.5 * s).exp()))
    }

    /// Symmetric Gram matrix of `x` with itself; the diagonal equals
    /// `gamma` exactly and the lower triangle is mirrored upward.
    pub fn matrix_sym(&self, x: &Array2<f64>) -> Result<SymMatrix> {
        self.check_dims(x.ncols())?;
        let scaled = self.scale_inputs(&x.view());
        let gamma = self.variance();
        let n = x.nrows();
        Ok(SymMatrix::from_fn(n, |i, j| {
            if i == j {
                gamma
            } else {
                let mut s = 0.0;
                for d in 0..scaled.ncols() {
                    let diff = scaled[[i, d]] - scaled[[j, d]];
                    s += diff * diff;
                }
                gamma * (-0.5 * s).exp()
            }
        }))
    }

    /// Diagonal of the Gram matrix: `gamma` at every point (the RBF kernel
    /// is stationary).
    pub fn diag(&self, xa: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_dims(xa.ncols())?;
        Ok(Array1::from_elem(xa.nrows(), self.variance()))
    }

    /// Gradients of the covariance matrix with respect to each
    /// log-hyperparameter:
    /// `dK/d log gamma = K`, and
    /// `dK/d log sigma_d = K .* (squared scaled distances along d)`
    /// (summed over dimensions sharing a lengthscale).
    pub fn grads(&self, xa: &Array2<f64>, xb: &Array2<f64>) -> Result<KernelGrads> {
        let k = self.matrix(xa, xb)?;
        let d = xa.ncols();
        let mut wrt_log_lengthscales = Vec::with_capacity(self.log_lengthscales.len());
        if self.is_isotropic() {
            let mut factor = Array2::zeros(k.raw_dim());
            for dim in 0..d {
                accumulate_sq_scaled(&mut factor, xa, xb, dim, self.lengthscale(dim));
            }
            wrt_log_lengthscales.push(&k * &factor);
        } else {
            for dim in 0..d {
                let mut factor = Array2::zeros(k.raw_dim());
                accumulate_sq_scaled(&mut factor, xa, xb, dim, self.lengthscale(dim));
                wrt_log_lengthscales.push(&k * &factor);
            }
        }
        Ok(KernelGrads {
            wrt_log_variance: k,
            wrt_log_lengthscales,
        })
    }
}

/// Per-hyperparameter gradient matrices of a covariance matrix.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    /// Equals the covariance matrix itself.
    pub wrt_log_variance: Array2<f64>,
    /// One matrix per stored lengthscale.
    pub wrt_log_lengthscales: Vec<Array2<f64>>,
}

fn accumulate_sq_scaled(
    acc: &mut Array2<f64>,
    xa: &Array2<f64>,
    xb: &Array2<f64>,
    dim: usize,
    lengthscale: f64,
) {
    let inv2 = 1.0 / (lengthscale * lengthscale);
    for i in 0..xa.nrows() {
        for j in 0..xb.nrows() {
            let diff = xa[[i, dim]] - xb[[j, dim]];
            acc[[i, j]] += diff * diff * inv2;
        }
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`,
/// computed through a matrix product and clamped at zero.
pub(crate) fn scaled_sqdist(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let an = a.mapv(|v| v * v).sum_axis(Axis(1));
    let bn = b.mapv(|v| v * v).sum_axis(Axis(1));
    let cross = a.dot(&b.t());
    let mut sq = Array2::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            sq[[i, j]] = (an[i] + bn[j] - 2.0 * cross[[i, j]]).max(0.0);
        }
    }
    sq
}

/// Log of the median pairwise distance of the rows of `x`; a robust
/// lengthscale initializer. Falls back to 0 for degenerate inputs.
pub fn log_median_distance(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    if n < 2 {
        return 0.0;
    }
    // Cap the cost on large inputs by striding through rows.
    let cap = 500usize;
    let idx: Vec<usize> = if n <= cap {
        (0..n).collect()
    } else {
        let stride = n / cap;
        (0..cap).map(|i| i * stride).collect()
    };
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (p, &i) in idx.iter().enumerate() {
        for &j in idx.iter().skip(p + 1) {
            let mut s = 0.0;
            for d in 0..x.ncols() {
                let diff = x[[i, d]] - x[[j, d]];
                s += diff * diff;
            }
            dists.push(s.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[dists.len() / 2];
    if median > 0.0 {
        median.ln()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_gives_variance() {
        let p = KernelParams::isotropic(0.7, -0.2);
        let x = array![[1.0, 2.0]];
        let k = p.matrix(&x, &x).unwrap();
        assert_eq!(k.dim(), (1, 1));
        assert_eq!(k[[0, 0]], p.variance());
    }

    #[test]
    fn unit_distance_formula() {
        // points 0 and sqrt(2) in 1-D with gamma = sigma = 1: k = exp(-1).
        let p = KernelParams::isotropic(0.0, 0.0);
        let xa = array![[0.0]];
        let xb = array![[2f64.sqrt()]];
        let k = p.matrix(&xa, &xb).unwrap();
        assert_abs_diff_eq!(k[[0, 0]], (-1.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn ard_huge_lengthscale_ignores_dimension() {
        let p = KernelParams::ard(0.0, vec![0.0, 1e6f64.ln()]);
        let xa = array![[0.5, 0.0]];
        let xb = array![[0.1, 3.0]];
        let xb2 = array![[0.1, -40.0]];
        let k1 = p.matrix(&xa, &xb).unwrap()[[0, 0]];
        let k2 = p.matrix(&xa, &xb2).unwrap()[[0, 0]];
        assert_abs_diff_eq!(k1, k2, epsilon = 1e-6);
    }

    #[test]
    fn diag_is_constant_gamma() {
        let p = KernelParams::isotropic(2.5f64.ln(), 0.3);
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let d = p.diag(&x).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|&v| v == 2.5));

        let empty = Array2::<f64>::zeros((0, 1));
        assert_eq!(p.diag(&empty).unwrap().len(), 0);
    }

    #[test]
    fn diag_matches_matrix_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = KernelParams::isotropic(0.4, -0.5);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let k = p.matrix(&x, &x).unwrap();
        let d = p.diag(&x).unwrap();
        for i in 0..6 {
            assert_eq!(k[[i, i]], d[i]);
        }
    }

    #[test]
    fn grad_wrt_log_variance_is_kernel() {
        let p = KernelParams::isotropic(0.3, 0.1);
        let xa = array![[0.0], [1.0]];
        let xb = array![[0.5], [2.0], [3.0]];
        let g = p.grads(&xa, &xb).unwrap();
        let k = p.matrix(&xa, &xb).unwrap();
        assert_abs_diff_eq!(&g.wrt_log_variance, &k, epsilon = 0.0);
    }

    #[test]
    fn grad_wrt_lengthscale_vanishes_on_diagonal() {
        let p = KernelParams::isotropic(0.0, 0.0);
        let x = array![[0.0], [1.5]];
        let g = p.grads(&x, &x).unwrap();
        for i in 0..2 {
            assert_eq!(g.wrt_log_lengthscales[0][[i, i]], 0.0);
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xa = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let xb = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let p = KernelParams::ard(0.2, vec![-0.3, 0.4]);
        let g = p.grads(&xa, &xb).unwrap();
        let h = 1e-5;

        let fd = |plus: &KernelParams, minus: &KernelParams| -> Array2<f64> {
            let kp = plus.matrix(&xa, &xb).unwrap();
            let km = minus.matrix(&xa, &xb).unwrap();
            (&kp - &km) / (2.0 * h)
        };

        let mut pv = p.clone();
        let mut mv = p.clone();
        pv.log_variance += h;
        mv.log_variance -= h;
        let fd_v = fd(&pv, &mv);
        for (a, b) in g.wrt_log_variance.iter().zip(fd_v.iter()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3));
        }

        for d in 0..2 {
            let mut pl = p.clone();
            let mut ml = p.clone();
            pl.log_lengthscales[d] += h;
            ml.log_lengthscales[d] -= h;
            let fd_l = fd(&pl, &ml);
            for (a, b) in g.wrt_log_lengthscales[d].iter().zip(fd_l.iter()) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn gram_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [10, 50, 200] {
            let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
            let p = KernelParams::isotropic(0.0, 0.0);
            let k = p.matrix_sym(&x).unwrap();
            let f = linalg::cholesky(&k, linalg::default_jitter(&k)).unwrap();
            assert!(f.jitter() <= 1e-2 * k.mean_diag());
        }
    }

    #[test]
    fn bounded_by_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = KernelParams::isotropic(0.8, -0.1);
        let xa = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
        let xb = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
        let k = p.matrix(&xa, &xb).unwrap();
        let gamma = p.variance();
        assert!(k.iter().all(|&v| v <= gamma + 1e-12 && v > 0.0));
    }
}
