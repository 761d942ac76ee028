//! Symmetric positive-definite solves with an escalating jitter policy.
//!
//! Every `P x P` resolvent in the crate goes through [`SpdFactor`]: the matrix
//! is factorized by Cholesky after adding `ridge * I` (the `1/beta` term of a
//! finite-temperature resolvent) plus, at zero temperature, a mandatory jitter
//! of `1e-10` times the mean diagonal. If factorization fails the jitter
//! escalates tenfold per attempt up to `1e-6` times the mean diagonal, each
//! escalation logged, before giving up.

use crate::error::{CoreError, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative jitter applied to zero-temperature resolvents from the start.
pub const BASE_JITTER_REL: f64 = 1e-10;
/// Relative jitter beyond which factorization is abandoned.
pub const MAX_JITTER_REL: f64 = 1e-6;

/// A Cholesky factorization of `A + ridge*I + jitter*I`.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Jitter actually applied, as an absolute value.
    pub jitter: f64,
    /// Number of tenfold escalations beyond the first attempt.
    pub escalations: u32,
}

impl SpdFactor {
    /// Factorizes `a + ridge*I`. When `mandatory_jitter` is true (the
    /// zero-temperature path) the first attempt already carries the base
    /// jitter; otherwise the first attempt is bare.
    pub fn new(a: &DMatrix<f64>, ridge: f64, mandatory_jitter: bool) -> Result<SpdFactor> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(CoreError::numerical("factorization needs a square matrix"));
        }
        let mean_diag = a.trace() / n as f64;
        let scale = if mean_diag.abs() > 0.0 { mean_diag.abs() } else { 1.0 };
        let base = BASE_JITTER_REL * scale;
        let max = MAX_JITTER_REL * scale;

        let mut jitter = if mandatory_jitter { base } else { 0.0 };
        let mut escalations = 0u32;
        loop {
            let mut m = a.clone();
            let shift = ridge + jitter;
            if shift != 0.0 {
                for i in 0..n {
                    m[(i, i)] += shift;
                }
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(SpdFactor {
                    chol,
                    jitter,
                    escalations,
                });
            }
            let next = if jitter == 0.0 { base } else { jitter * 10.0 };
            if next > max * (1.0 + 1e-12) {
                return Err(CoreError::numerical(format!(
                    "matrix not positive definite even with jitter {max:.3e} (mean diag {mean_diag:.3e})"
                )));
            }
            escalations += 1;
            log::warn!(
                "Cholesky failed at jitter {jitter:.3e}; escalating to {next:.3e} (mean diag {mean_diag:.3e})"
            );
            jitter = next;
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `ln det (A + shift*I)`.
    pub fn ln_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    /// Lower Cholesky factor `L` with `L L^T = A + ridge*I + jitter*I`,
    /// suitable for shaping Gaussian noise to the factored covariance.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    eig.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Max-norm distance between two matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
