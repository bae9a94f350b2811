//! Dense linear-algebra primitives shared by every model: Cholesky
//! factorization with jitter escalation, triangular solves, log-determinants,
//! and low-rank-plus-diagonal solves that never form the full n x n matrix.

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, Diag, SolveTriangular, UPLO};

use crate::error::{Error, Result};

/// A dense symmetric matrix. Symmetry holds by construction: the lower
/// triangle is mirrored onto the upper one when the matrix is built.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix by mirroring the lower triangle of `a`.
    pub fn from_lower(mut a: Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                n,
                a.ncols()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                a[[i, j]] = a[[j, i]];
            }
        }
        Ok(SymMatrix { data: a })
    }

    /// Builds from entries `f(i, j)`, evaluating only the lower triangle.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        SymMatrix { data }
    }

    pub fn order(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Mean of the diagonal; used to scale the default jitter.
    pub fn mean_diag(&self) -> f64 {
        let n = self.order();
        if n == 0 {
            return 0.0;
        }
        self.data.diag().sum() / n as f64
    }
}

/// Lower-triangular Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: Array2<f64>,
    jitter: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn order(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &Array2<f64>) -> Array2<f64> {
        self.lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .expect("triangular solve on a valid factor")
    }

    /// Solves `L^T x = b`.
    pub fn solve_lower_t(&self, b: &Array2<f64>) -> Array2<f64> {
        self.lower
            .t()
            .to_owned()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, b)
            .expect("triangular solve on a valid factor")
    }

    /// Explicit inverse of `A + jitter * I`, reusing the stored factor.
    pub fn inverse(&self) -> Array2<f64> {
        use ndarray_linalg::{CholeskyFactorized, InverseC};
        let f = CholeskyFactorized {
            factor: self.lower.clone(),
            uplo: UPLO::Lower,
        };
        f.invc().expect("inverse from a valid factor")
    }
}

/// Default jitter base: 1e-8 of the mean diagonal.
pub fn default_jitter(a: &SymMatrix) -> f64 {
    1e-8 * a.mean_diag().abs()
}

/// Factorizes `a + j * I`, escalating `j` through
/// `{0, base_jitter, 10 * base_jitter, ..., 1e6 * base_jitter}` until the
/// factorization succeeds. Records the jitter that was used.
pub fn cholesky(a: &SymMatrix, base_jitter: f64) -> Result<CholFactor> {
    debug_assert!(base_jitter >= 0.0);
    let n = a.order();
    if n == 0 {
        return Ok(CholFactor {
            lower: Array2::zeros((0, 0)),
            jitter: 0.0,
        });
    }
    let mut jitter = 0.0;
    let mut rung = 0u32;
    loop {
        let shifted = if jitter == 0.0 {
            a.data.clone()
        } else {
            let mut s = a.data.clone();
            for i in 0..n {
                s[[i, i]] += jitter;
            }
            s
        };
        if let Ok(lower) = shifted.cholesky(UPLO::Lower) {
            if lower.diag().iter().all(|&d| d > 0.0 && d.is_finite()) {
                return Ok(CholFactor { lower, jitter });
            }
        }
        if base_jitter == 0.0 || rung > 6 {
            return Err(Error::NotPositiveDefinite {
                jitter_tried: jitter,
            });
        }
        jitter = base_jitter * 10f64.powi(rung as i32);
        rung += 1;
    }
}

/// Solves `(L L^T) x = b` by forward then backward substitution.
pub fn tri_solve(l: &CholFactor, b: &Array2<f64>) -> Result<Array2<f64>> {
    if b.nrows() != l.order() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, factor has order {}",
            b.nrows(),
            l.order()
        )));
    }
    Ok(l.solve_lower_t(&l.solve_lower(b)))
}

/// Vector convenience wrapper around [`tri_solve`].
pub fn tri_solve_vec(l: &CholFactor, b: &Array1<f64>) -> Result<Array1<f64>> {
    let b2 = b
        .view()
        .into_shape_with_order((b.len(), 1))
        .expect("column reshape");
    let x = tri_solve(l, &b2.to_owned())?;
    Ok(x.column(0).to_owned())
}

/// `log |A + jitter * I| = 2 * sum(log diag L)`.
pub fn logdet(l: &CholFactor) -> f64 {
    2.0 * l.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `(Q + diag(d)) x = b` where `Q = K_xu K_uu^{-1} K_ux`, in
/// O(n m^2) via the Woodbury identity. `k_xu` is n x m; `d` must be
/// strictly positive.
pub fn lowrank_diag_solve(
    k_xu: &Array2<f64>,
    kuu: &SymMatrix,
    d: &Array1<f64>,
    b: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (n, m) = (k_xu.nrows(), k_xu.ncols());
    if kuu.order() != m {
        return Err(Error::DimensionMismatch(format!(
            "k_xu has {} columns but kuu has order {}",
            m,
            kuu.order()
        )));
    }
    if d.len() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected {} rows in d and b, got {} and {}",
            n,
            d.len(),
            b.nrows()
        )));
    }
    let dinv_b = b / &d.view().insert_axis(Axis(1));
    if m == 0 {
        return Ok(dinv_b);
    }
    // A = K_uu + K_ux D^{-1} K_xu, so
    // (Q + D)^{-1} = D^{-1} - D^{-1} K_xu A^{-1} K_ux D^{-1}.
    let dinv_kxu = k_xu / &d.view().insert_axis(Axis(1));
    let a = SymMatrix::from_lower(kuu.as_array() + &k_xu.t().dot(&dinv_kxu))?;
    let fa = cholesky(&a, default_jitter(&a))?;
    let inner = tri_solve(&fa, &k_xu.t().dot(&dinv_b))?;
    Ok(&dinv_b - &dinv_kxu.dot(&inner))
}

/// `log |Q + diag(d)|` via the matrix determinant lemma:
/// `log|A| - log|K_uu| + sum(log d)` with `A = K_uu + K_ux D^{-1} K_xu`.
pub fn lowrank_diag_logdet(k_xu: &Array2<f64>, kuu: &SymMatrix, d: &Array1<f64>) -> Result<f64> {
    let m = k_xu.ncols();
    let sum_log_d = d.iter().map(|x| x.ln()).sum::<f64>();
    if m == 0 {
        return Ok(sum_log_d);
    }
    let dinv_kxu = k_xu / &d.view().insert_axis(Axis(1));
    let a = SymMatrix::from_lower(kuu.as_array() + &k_xu.t().dot(&dinv_kxu))?;
    let fa = cholesky(&a, default_jitter(&a))?;
    let fk = cholesky(kuu, default_jitter(kuu))?;
    Ok(logdet(&fa) - logdet(&fk) + sum_log_d)
}
