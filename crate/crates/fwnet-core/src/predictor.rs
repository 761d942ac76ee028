//! Bayesian predictor statistics (bias, variance, generalization error) and
//! the theoretical finite-width shifts of the similarity matrix.

use crate::data::Beta;
use crate::error::Result;
use crate::kernel::{LocalKernel, TestVectors};
use crate::linalg::{self, SpdFactor};
use crate::saddle::{renormalized_kernel, Architecture};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct PredictorStats {
    /// Posterior mean of the network output at the test point.
    pub gamma: f64,
    /// Posterior variance at the test point.
    pub sigma2: f64,
    /// `(y0 - gamma)^2 + sigma2`.
    pub gen_error: f64,
}

#[derive(Debug, Clone)]
pub struct DeltaKMatrix {
    pub architecture: Architecture,
    pub entries: DMatrix<f64>,
}

/// Renormalizes test-kernel tensors with the solved order parameter:
/// `kappa_R = (1/(lambda1 n_patches)) Sum_ij Qbar_ij kappa^{ij}` and the same
/// contraction for the test self-overlap. Single-patch inputs reduce to the
/// fully-connected rule `kappa_R = (Qbar/lambda1) kappa`.
pub fn renormalize_test_vector(
    arch: Architecture,
    tv: &TestVectors,
    qbar: &DMatrix<f64>,
    lambda1: f64,
) -> (DVector<f64>, f64) {
    let np = tv.n_patches();
    let mut w = match arch {
        Architecture::LocallyConnected => DMatrix::from_diagonal(&qbar.diagonal()),
        _ => qbar.clone(),
    };
    w /= lambda1 * np as f64;
    (tv.weighted_sum(&w), tv.weighted_self(&w))
}

/// Posterior mean and variance at one test point:
/// `Gamma = kappa_R^T (I/beta + K_R)^{-1} y`,
/// `sigma2 = kappa0_R - kappa_R^T (I/beta + K_R)^{-1} kappa_R`,
/// `gen_error = (y0 - Gamma)^2 + sigma2`.
pub fn predict(
    k_r: &DMatrix<f64>,
    kappa_r: &DVector<f64>,
    kappa0_r: f64,
    y: &DVector<f64>,
    y0: f64,
    beta: Beta,
) -> Result<PredictorStats> {
    let factor = SpdFactor::new(k_r, beta.ridge(), beta.is_infinite())?;
    let gamma = kappa_r.dot(&factor.solve_vec(y));
    let sigma2 = kappa0_r - kappa_r.dot(&factor.solve_vec(kappa_r));
    Ok(PredictorStats {
        gamma,
        sigma2,
        gen_error: (y0 - gamma) * (y0 - gamma) + sigma2,
    })
}

/// Full pipeline for one test point: renormalize the kernel and test vectors
/// with `Qbar`, then evaluate the predictor.
pub fn predict_point(
    arch: Architecture,
    lk: &LocalKernel,
    tv: &TestVectors,
    qbar: &DMatrix<f64>,
    y: &DVector<f64>,
    y0: f64,
    beta: Beta,
    lambda1: f64,
) -> Result<PredictorStats> {
    let k_r = renormalized_kernel(arch, lk, qbar, lambda1);
    let (kappa_r, kappa0_r) = renormalize_test_vector(arch, tv, qbar, lambda1);
    predict(&k_r, &kappa_r, kappa0_r, y, y0, beta)
}

/// Zero-temperature fully-connected bias `Gamma = kappa^T K^{-1} y`: the
/// renormalization factor cancels between the test vector and the inverse
/// kernel, so no order parameter appears.
pub fn fc_bias_zero_temp(k: &DMatrix<f64>, kappa: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let factor = SpdFactor::new(k, 0.0, true)?;
    Ok(kappa.dot(&factor.solve_vec(y)))
}

/// Fully-connected similarity shift
/// `DeltaK = -(Qbar/(lambda1 N1)) K A K` with `A = G - (Gy)(Gy)^T` and
/// `G = (I/beta + K_R)^{-1}`. At zero temperature `G = (lambda1/Qbar) K^{-1}`
/// collapses it to the closed form `-(1/N1)(K - (lambda1/Qbar) y y^T)`, which
/// is used directly; as `beta -> 0` the shift vanishes (prior ensemble).
pub fn theory_delta_k_fc(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    qbar: f64,
    lambda1: f64,
    n1: usize,
    beta: Beta,
) -> Result<DeltaKMatrix> {
    let entries = match beta {
        Beta::Infinite => {
            let outer = y * y.transpose() * (lambda1 / qbar);
            (outer - k) / n1 as f64
        }
        Beta::Finite(_) => {
            let k_r = k * (qbar / lambda1);
            let factor = SpdFactor::new(&k_r, beta.ridge(), false)?;
            let gy = factor.solve_vec(y);
            let a = factor.inverse() - &gy * gy.transpose();
            let mut m = k * a * k * (-qbar / (lambda1 * n1 as f64));
            linalg::symmetrize(&mut m);
            m
        }
    };
    Ok(DeltaKMatrix {
        architecture: Architecture::FullyConnected,
        entries,
    })
}

/// Convolutional similarity shift
/// `DeltaK = -(1/(2 lambda1 N1)) Sum_ijk Qbar_ij (K^{ik} A (K^{kj})^T + K^{ki} A (K^{jk})^T)`
/// with `A = G - (Gy)(Gy)^T` and `G = (I/beta + K_R)^{-1}`, evaluated by
/// caching the `K^{ab} A` products instead of materializing the six-index
/// tensor. Reduces to the fully-connected shift on single-patch geometry.
pub fn theory_delta_k_cnn(
    lk: &LocalKernel,
    qbar: &DMatrix<f64>,
    k_r: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
    n1: usize,
    beta: Beta,
) -> Result<DeltaKMatrix> {
    let p = lk.n_patterns();
    let np = lk.n_patches();
    let factor = SpdFactor::new(k_r, beta.ridge(), beta.is_infinite())?;
    let u = factor.solve_vec(y);
    let a = factor.inverse() - &u * u.transpose();

    let blocks: Vec<Vec<DMatrix<f64>>> = (0..np)
        .map(|i| (0..np).map(|j| lk.block(i, j)).collect())
        .collect();
    let cached: Vec<Vec<DMatrix<f64>>> = (0..np)
        .map(|i| (0..np).map(|j| &blocks[i][j] * &a).collect())
        .collect();

    let mut total = DMatrix::zeros(p, p);
    for k in 0..np {
        for j in 0..np {
            // Sum_i Qbar_ij K^{ik} A, then right-multiply by (K^{kj})^T = K^{jk}.
            let mut e = DMatrix::zeros(p, p);
            // Sum_i Qbar_ij K^{ki} A, then right-multiply by (K^{jk})^T = K^{kj}.
            let mut f = DMatrix::zeros(p, p);
            for i in 0..np {
                let w = qbar[(i, j)];
                if w != 0.0 {
                    e += &cached[i][k] * w;
                    f += &cached[k][i] * w;
                }
            }
            total += e * &blocks[j][k];
            total += f * &blocks[k][j];
        }
    }
    let mut entries = total / (-2.0 * lambda1 * n1 as f64);
    linalg::symmetrize(&mut entries);
    Ok(DeltaKMatrix {
        architecture: Architecture::Convolutional,
        entries,
    })
}
