//! Effective actions of the three architectures and the damped fixed-point
//! solver for their order parameters `(Q, Qbar)`.
//!
//! The stationarity conditions are `Qbar = (I + Q)^{-1}` together with
//! `Q[i,j] = (alpha / (P lambda1 n_patches)) (Tr[G K^{ij}] - y^T G K^{ij} G y)`
//! where `G = (I/beta + K_R)^{-1}` and `K_R` is the renormalized kernel built
//! from `Qbar`. Eliminating `Q` turns them into the stationarity of a single
//! smooth objective over positive-definite `Qbar`, which the solver descends
//! monotonically. Fully-connected networks are the single-patch case and
//! locally-connected ones the diagonal restriction, so one solver serves all
//! three.

use crate::data::Beta;
use crate::error::{CoreError, Result};
use crate::kernel::LocalKernel;
use crate::linalg::{self, SpdFactor};
use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    FullyConnected,
    LocallyConnected,
    Convolutional,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::FullyConnected => "fc",
            Architecture::LocallyConnected => "lcn",
            Architecture::Convolutional => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Architecture> {
        match s.to_ascii_lowercase().as_str() {
            "fc" | "fcn" | "fully-connected" => Ok(Architecture::FullyConnected),
            "lcn" | "locally-connected" => Ok(Architecture::LocallyConnected),
            "cnn" | "convolutional" => Ok(Architecture::Convolutional),
            other => Err(CoreError::config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SaddleOptions {
    /// Max-norm tolerance on the fixed-point residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial step fraction toward the fixed-point target, in (0, 1]. The
    /// line search doubles the trial step each iteration (capped at 1) and
    /// halves it until the objective decreases.
    pub damping: f64,
}

impl Default for SaddleOptions {
    fn default() -> Self {
        SaddleOptions {
            tol: 1e-8,
            max_iter: 2000,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub architecture: Architecture,
    /// `patch_count x patch_count`; scalar architectures use a 1 x 1 matrix.
    pub qbar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Max-norm violation of `Qbar = (I + Q)^{-1}` at the returned point;
    /// the `Q` equation holds exactly by construction.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest eigenvalue of the returned `Qbar`. Positive definiteness is
    /// observed empirically, not guaranteed, so it is reported rather than
    /// assumed.
    pub qbar_min_eigenvalue: f64,
}

impl SaddleSolution {
    /// Scalar order parameter for the single-patch case.
    pub fn qbar_scalar(&self) -> f64 {
        assert_eq!(self.qbar.nrows(), 1, "qbar_scalar on multi-patch solution");
        self.qbar[(0, 0)]
    }

    pub fn q_scalar(&self) -> f64 {
        assert_eq!(self.q.nrows(), 1, "q_scalar on multi-patch solution");
        self.q[(0, 0)]
    }
}

/// `K_R = (Qbar / lambda1) K` for a fully-connected network.
pub fn renormalize_fc(k: &DMatrix<f64>, qbar: f64, lambda1: f64) -> DMatrix<f64> {
    k * (qbar / lambda1)
}

/// `K_R = (1/(lambda1 n_patches)) Sum_i Qbar_i K^{ii}` for a
/// locally-connected network.
pub fn renormalize_lcn(lk: &LocalKernel, qbar_diag: &DVector<f64>, lambda1: f64) -> DMatrix<f64> {
    renormalize_cnn(lk, &DMatrix::from_diagonal(qbar_diag), lambda1)
}

/// `K_R = (1/(lambda1 n_patches)) Sum_ij Qbar_ij K^{ij}` for a convolutional
/// network.
pub fn renormalize_cnn(lk: &LocalKernel, qbar: &DMatrix<f64>, lambda1: f64) -> DMatrix<f64> {
    lk.weighted_block_sum(qbar) / (lambda1 * lk.n_patches() as f64)
}

/// Renormalized kernel for any architecture from a solved `Qbar`.
pub fn renormalized_kernel(
    arch: Architecture,
    lk: &LocalKernel,
    qbar: &DMatrix<f64>,
    lambda1: f64,
) -> DMatrix<f64> {
    match arch {
        Architecture::FullyConnected | Architecture::Convolutional => {
            renormalize_cnn(lk, qbar, lambda1)
        }
        Architecture::LocallyConnected => {
            renormalize_lcn(lk, &qbar.diagonal(), lambda1)
        }
    }
}

/// Data-dependent part of every action:
/// `Tr log beta(I/beta + K_R) + y^T (I/beta + K_R)^{-1} y`.
///
/// At infinite beta the additive constant `P log beta` is dropped (it does
/// not depend on the order parameters), leaving `log det K_R + y^T K_R^{-1} y`
/// with the standard zero-temperature jitter.
fn data_terms(k_r: &DMatrix<f64>, y: &DVector<f64>, beta: Beta) -> Result<f64> {
    let factor = SpdFactor::new(k_r, beta.ridge(), beta.is_infinite())?;
    let quad = y.dot(&factor.solve_vec(y));
    let trlog = match beta {
        Beta::Finite(b) => factor.ln_det() + y.len() as f64 * b.ln(),
        Beta::Infinite => factor.ln_det(),
    };
    Ok(trlog + quad)
}

/// `Tr log(I + Q)` via the symmetric eigendecomposition; errors when `I + Q`
/// is not positive definite.
fn tr_log_one_plus(q: &DMatrix<f64>) -> Result<f64> {
    let eigs = (DMatrix::identity(q.nrows(), q.ncols()) + q).symmetric_eigenvalues();
    let mut total = 0.0;
    for e in eigs.iter() {
        if *e <= 0.0 {
            return Err(CoreError::numerical(format!(
                "I + Q has non-positive eigenvalue {e:.3e}"
            )));
        }
        total += e.ln();
    }
    Ok(total)
}

/// Fully-connected effective action
/// `S = -Q Qbar + log(1 + Q) + (alpha/P)(Tr log beta(I/beta + K_R) + y^T (I/beta + K_R)^{-1} y)`.
pub fn fc_action(
    q: f64,
    qbar: f64,
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    beta: Beta,
    lambda1: f64,
) -> Result<f64> {
    if 1.0 + q <= 0.0 {
        return Err(CoreError::numerical("1 + Q must be positive"));
    }
    let p = y.len() as f64;
    let k_r = renormalize_fc(k, qbar, lambda1);
    Ok(-q * qbar + (1.0 + q).ln() + alpha / p * data_terms(&k_r, y, beta)?)
}

/// Convolutional effective action
/// `S = -Tr Q Qbar + Tr log(I + Q) + (alpha/P)(Tr log beta(I/beta + K_R) + y^T (I/beta + K_R)^{-1} y)`.
pub fn cnn_action(
    q: &DMatrix<f64>,
    qbar: &DMatrix<f64>,
    lk: &LocalKernel,
    y: &DVector<f64>,
    alpha: f64,
    beta: Beta,
    lambda1: f64,
) -> Result<f64> {
    let p = y.len() as f64;
    let k_r = renormalize_cnn(lk, qbar, lambda1);
    let order = -(q * qbar).trace() + tr_log_one_plus(q)?;
    Ok(order + alpha / p * data_terms(&k_r, y, beta)?)
}

/// Locally-connected effective action: the diagonal restriction of
/// [`cnn_action`], `S = -Sum_i (Q_i Qbar_i - log(1 + Q_i)) + data terms`.
pub fn lcn_action(
    q_diag: &DVector<f64>,
    qbar_diag: &DVector<f64>,
    lk: &LocalKernel,
    y: &DVector<f64>,
    alpha: f64,
    beta: Beta,
    lambda1: f64,
) -> Result<f64> {
    let p = y.len() as f64;
    let k_r = renormalize_lcn(lk, qbar_diag, lambda1);
    let mut order = 0.0;
    for i in 0..q_diag.len() {
        if 1.0 + q_diag[i] <= 0.0 {
            return Err(CoreError::numerical("1 + Q_i must be positive"));
        }
        order += -q_diag[i] * qbar_diag[i] + (1.0 + q_diag[i]).ln();
    }
    Ok(order + alpha / p * data_terms(&k_r, y, beta)?)
}

/// Everything the solver needs at one `Qbar`: the `Q` equation's right-hand
/// side, the reduced objective and its gradient, the fixed-point target, and
/// the residual (infinite when `I + Q` leaves the positive cone and the
/// target stops existing).
struct SaddlePoint {
    q: DMatrix<f64>,
    grad: DMatrix<f64>,
    target: Option<DMatrix<f64>>,
    residual: f64,
    objective: f64,
}

/// Solves the saddle-point equations from the infinite-width point
/// `Qbar = I` by monotone descent on the reduced action (see [`iterate`]).
///
/// Descent reaches a stationary point, but a strongly data-dominated problem
/// can in principle own several. When the direct run fails or stalls, the
/// solver follows the physical branch up a geometric temperature ladder: it
/// re-solves at a small `beta` where the objective is nearly quadratic and
/// multiplies `beta` by 10 per rung until the requested value (finishing
/// with an infinite-`beta` rung when asked for zero temperature),
/// warm-starting each rung from the last.
pub fn solve_saddle(
    arch: Architecture,
    lk: &LocalKernel,
    y: &DVector<f64>,
    alpha: f64,
    beta: Beta,
    lambda1: f64,
    opts: &SaddleOptions,
) -> Result<SaddleSolution> {
    if arch == Architecture::FullyConnected && lk.n_patches() != 1 {
        return Err(CoreError::config(
            "fully-connected saddle needs a single-patch kernel",
        ));
    }
    if y.len() != lk.n_patterns() {
        return Err(CoreError::config("label count does not match kernel"));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(CoreError::config("damping must lie in (0, 1]"));
    }
    if alpha < 0.0 {
        return Err(CoreError::config("alpha must be non-negative"));
    }
    let np = lk.n_patches();
    let eye = DMatrix::<f64>::identity(np, np);

    let direct = iterate(arch, lk, y, alpha, beta, lambda1, opts, eye.clone());
    if let Ok(sol) = &direct {
        if sol.converged {
            return direct;
        }
    }

    let finish = |sol: SaddleSolution| {
        if !sol.converged {
            log::warn!(
                "saddle iteration stopped at residual {:.3e} after {} steps",
                sol.residual,
                sol.iterations
            );
        }
        Ok(sol)
    };
    let k_scale = renormalize_cnn(lk, &eye, lambda1).diagonal().mean();
    if !(k_scale > 0.0) {
        return direct.and_then(finish);
    }
    let continued = (|| {
        let mut qbar = eye;
        let mut total_iterations = 0;
        let mut last: Option<SaddleSolution> = None;
        for rung in beta_ladder(k_scale, alpha, beta) {
            let mut sol = iterate(arch, lk, y, alpha, rung, lambda1, opts, qbar)?;
            total_iterations += sol.iterations;
            if !sol.converged && rung != beta {
                return Err(CoreError::numerical(format!(
                    "saddle continuation stalled at beta {rung:?} with residual {:.3e}",
                    sol.residual
                )));
            }
            qbar = sol.qbar.clone();
            sol.iterations = total_iterations;
            last = Some(sol);
        }
        Ok(last.expect("ladder has at least one rung"))
    })();
    match continued {
        Ok(sol) => finish(sol),
        // Fall back to whatever the direct attempt produced so callers still
        // see its diagnostics when the ladder cannot help either.
        Err(err) => direct.and_then(finish).map_err(|_| err),
    }
}

/// Geometric ladder of solver temperatures ending exactly at `target`; the
/// first rung is chosen so `beta * K` is small and the fixed-point map is
/// close to the identity-`Qbar` contraction.
fn beta_ladder(k_scale: f64, alpha: f64, target: Beta) -> Vec<Beta> {
    let start = 0.1 / (k_scale * alpha.max(1.0));
    let top = match target {
        Beta::Finite(b) => b,
        Beta::Infinite => 1e8 / k_scale,
    };
    let mut out = Vec::new();
    let mut b = start.min(top);
    while b < top {
        out.push(Beta::Finite(b));
        b *= 10.0;
    }
    out.push(Beta::Finite(top));
    if target == Beta::Infinite {
        out.push(Beta::Infinite);
    }
    out
}

/// One monotone descent run at fixed `beta`.
///
/// Eliminating `Q` from the saddle equations leaves the stationarity of the
/// reduced objective
/// `S(Qbar) = Tr Qbar - n_p - Tr log Qbar + (alpha/P)(data terms)`
/// over positive-definite `Qbar`, with gradient `I + Q(Qbar) - Qbar^{-1}`.
/// Each step moves toward the fixed-point target `(I + Q)^{-1}` when
/// `I + Q` is positive definite (provably a descent direction there: the
/// directional derivative is `-Sum_i (l_i - 1)^2 / l_i` over the eigenvalues
/// `l_i` of `(I + Q) Qbar`) and along the negative gradient otherwise, with
/// a backtracking line search that keeps `Qbar` positive definite. The
/// objective is smooth where the fixed-point map has a pole
/// (`det(I + Q) = 0`), so descent crosses that surface instead of being
/// thrown to the degenerate corner `Qbar -> 0`.
///
/// A trial step is accepted on sufficient objective decrease while that
/// decrease is resolvable in double precision; near the solution, where
/// objective differences fall quadratically below the rounding floor, a step
/// is instead accepted when it contracts the fixed-point residual, which
/// stays resolvable all the way to tolerance. Convergence requires the
/// residual tolerance with `I + Q` positive definite; the `Tr log(I + Q)`
/// term of the full action demands the latter of any physical saddle.
#[allow(clippy::too_many_arguments)]
fn iterate(
    arch: Architecture,
    lk: &LocalKernel,
    y: &DVector<f64>,
    alpha: f64,
    beta: Beta,
    lambda1: f64,
    opts: &SaddleOptions,
    qbar0: DMatrix<f64>,
) -> Result<SaddleSolution> {
    let np = lk.n_patches();
    let p = y.len() as f64;
    let eye = DMatrix::<f64>::identity(np, np);
    let restrict = |m: &mut DMatrix<f64>| {
        if arch == Architecture::LocallyConnected {
            let d = m.diagonal();
            *m = DMatrix::from_diagonal(&d);
        }
    };
    // Full state at one `Qbar`; `None` outside the feasible cone. One kernel
    // factorization serves the objective, its gradient
    // `Q[i,j] = (alpha/(P lambda1 n_p))(Tr[G K^{ij}] - (Gy)^T K^{ij} (Gy))`
    // plus `I - Qbar^{-1}`, and the fixed-point data.
    let evaluate = |qbar: &DMatrix<f64>| -> Option<SaddlePoint> {
        let chol = Cholesky::new(qbar.clone())?;
        let trlog_qbar: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let k_r = renormalize_cnn(lk, qbar, lambda1);
        let factor = SpdFactor::new(&k_r, beta.ridge(), beta.is_infinite()).ok()?;
        let gy = factor.solve_vec(y);
        // `Tr log beta(I/beta + K_R) + y^T G y` up to a constant in `Qbar`.
        let data = factor.ln_det() + y.dot(&gy);
        let objective = qbar.trace() - np as f64 - trlog_qbar + alpha / p * data;
        let traces = lk.block_traces(&factor.inverse());
        let quads = lk.block_quadratic(&gy);
        let mut q = (traces - quads) * (alpha / (p * lambda1 * np as f64));
        linalg::symmetrize(&mut q);
        restrict(&mut q);
        let one_plus_q = &eye + &q;
        let mut grad = &one_plus_q - chol.inverse();
        linalg::symmetrize(&mut grad);
        restrict(&mut grad);
        let target = Cholesky::new(one_plus_q).map(|ch| {
            let mut t = ch.inverse();
            linalg::symmetrize(&mut t);
            restrict(&mut t);
            t
        });
        let residual = target
            .as_ref()
            .map_or(f64::INFINITY, |t| linalg::max_abs_diff(qbar, t));
        Some(SaddlePoint {
            q,
            grad,
            target,
            residual,
            objective,
        })
    };

    let mut qbar = qbar0;
    let mut cur = evaluate(&qbar).ok_or_else(|| {
        CoreError::numerical("saddle iteration started outside the positive-definite cone")
    })?;
    // Accepted step fraction, carried across iterations; each outer step
    // retries from twice the last accepted value.
    let mut theta = 0.5 * opts.damping;
    let mut iterations = 0;
    let mut converged = false;
    'outer: for iter in 1..=opts.max_iter {
        iterations = iter;
        if cur.residual <= opts.tol {
            converged = true;
            break;
        }
        let mut dir = match &cur.target {
            Some(t) => t - &qbar,
            None => -cur.grad.clone(),
        };
        let mut slope = cur.grad.dot(&dir);
        if slope >= 0.0 {
            dir = -cur.grad.clone();
            slope = -cur.grad.norm_squared();
            if slope == 0.0 {
                break;
            }
        }
        // Below this, an objective comparison is rounding noise.
        let noise = 32.0 * f64::EPSILON * (cur.objective.abs() + 1.0);
        theta = (2.0 * theta).min(1.0);
        loop {
            let cand = &qbar + &dir * theta;
            if let Some(next) = evaluate(&cand) {
                let wanted = -1e-4 * theta * slope;
                let decreased = wanted > noise && next.objective <= cur.objective - wanted;
                let contracting =
                    cur.residual.is_finite() && next.residual <= 0.9 * cur.residual;
                if decreased || contracting {
                    qbar = cand;
                    cur = next;
                    break;
                }
            }
            theta *= 0.5;
            if theta < 1e-14 {
                // No acceptable step at the numerical floor; report the
                // point reached rather than looping.
                break 'outer;
            }
        }
    }
    let qbar_min_eigenvalue = linalg::min_eigenvalue(&qbar);
    Ok(SaddleSolution {
        architecture: arch,
        qbar,
        q: cur.q,
        residual: cur.residual,
        iterations,
        converged,
        qbar_min_eigenvalue,
    })
}

/// Small-`alpha` expansion `Qbar = I + alpha dQbar` at zero temperature, with
/// `dQbar[i,j] = (1/P)(yt^T Kn^{ij} yt - Tr[Kn^{ij} Kbar^{-1}])`,
/// `Kn^{ij} = K^{ij}/(lambda1 n_patches)`, `yt = Kbar^{-1} y`, and `Kbar` the
/// patch-averaged kernel.
pub fn perturbative_delta_qbar(
    lk: &LocalKernel,
    y: &DVector<f64>,
    lambda1: f64,
) -> Result<DMatrix<f64>> {
    let p = y.len() as f64;
    let np = lk.n_patches() as f64;
    let kbar = crate::kernel::averaged_kernel(lk, lambda1);
    let factor = SpdFactor::new(&kbar, 0.0, true)?;
    let kbar_inv = factor.inverse();
    let yt = factor.solve_vec(y);
    let traces = lk.block_traces(&kbar_inv);
    let quads = lk.block_quadratic(&yt);
    let mut out = (quads - traces) / (p * lambda1 * np);
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// `Qbar = I + alpha dQbar` from [`perturbative_delta_qbar`].
pub fn perturbative_qbar(
    lk: &LocalKernel,
    y: &DVector<f64>,
    alpha: f64,
    lambda1: f64,
) -> Result<DMatrix<f64>> {
    let np = lk.n_patches();
    Ok(DMatrix::identity(np, np) + perturbative_delta_qbar(lk, y, lambda1)? * alpha)
}

/// Closed-form zero-temperature fully-connected order parameter,
/// `Qbar = ((1 - alpha) + sqrt((1 - alpha)^2 + 4 alpha g)) / 2` with
/// `g = lambda1 y^T K^{-1} y / P`. Used as an independent check on the
/// iterative solver.
pub fn fc_qbar_closed_form(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    lambda1: f64,
) -> Result<f64> {
    let p = y.len() as f64;
    let factor = SpdFactor::new(k, 0.0, true)?;
    let g = lambda1 * y.dot(&factor.solve_vec(y)) / p;
    let disc = (1.0 - alpha) * (1.0 - alpha) + 4.0 * alpha * g;
    Ok(0.5 * ((1.0 - alpha) + disc.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::data::{generate_linear_teacher, ConvGeometry};
    use crate::kernel::{
        averaged_kernel, kernel_from_local, local_covariance, LocalKernel, PatchMatrix,
    };

    fn toy_kernel(seed: u64, p: usize, n0: usize, m: usize, s: usize) -> (LocalKernel, DVector<f64>) {
        let ds = generate_linear_teacher(p, n0, seed).unwrap();
        let geom = ConvGeometry::one_dim(n0, m, s).unwrap();
        let cov = local_covariance(&ds.x, &geom, 1.0).unwrap();
        let y = ds.y.map(|v| 2.0 * v - 1.0);
        (kernel_from_local(&cov, Activation::Erf, 40), y)
    }

    #[test]
    fn renormalize_fc_identity_zero_and_ratio() {
        let (lk, _) = toy_kernel(3, 5, 12, 3, 3);
        let k = lk.block(0, 0);
        let lambda1 = 1.7;
        assert!(linalg::max_abs_diff(&renormalize_fc(&k, lambda1, lambda1), &k) < 1e-15);
        assert_eq!(renormalize_fc(&k, 0.0, lambda1).abs().max(), 0.0);
        let a = renormalize_fc(&k, 0.8, 1.3);
        let b = renormalize_fc(&k, 1.6, 2.6);
        assert!(linalg::max_abs_diff(&a, &b) < 1e-15);
    }

    #[test]
    fn renormalize_cnn_identity_weight_is_averaged_kernel() {
        let (lk, _) = toy_kernel(7, 5, 12, 3, 3);
        let np = lk.n_patches();
        let lambda1 = 2.1;
        let eye = DMatrix::identity(np, np);
        let a = renormalize_cnn(&lk, &eye, lambda1);
        let b = averaged_kernel(&lk, lambda1);
        assert!(linalg::max_abs_diff(&a, &b) < 1e-14);
    }

    #[test]
    fn renormalize_cnn_all_ones_on_identical_patches_doubles_identity_result() {
        // Two identical patches: every block K^{ij} equals K^{00}, so the
        // all-ones weight gives exactly twice the identity weight.
        let ds = generate_linear_teacher(4, 6, 5).unwrap();
        let mut x = DMatrix::zeros(4, 12);
        for mu in 0..4 {
            for k in 0..6 {
                x[(mu, k)] = ds.x[(mu, k)];
                x[(mu, k + 6)] = ds.x[(mu, k)];
            }
        }
        let geom = ConvGeometry::one_dim(12, 6, 6).unwrap();
        let cov = local_covariance(&x, &geom, 1.0).unwrap();
        let lk = kernel_from_local(&cov, Activation::Erf, 40);
        let eye = DMatrix::identity(2, 2);
        let ones = DMatrix::from_element(2, 2, 1.0);
        let a = renormalize_cnn(&lk, &ones, 1.0);
        let b = renormalize_cnn(&lk, &eye, 1.0) * 2.0;
        assert!(linalg::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn single_patch_cnn_action_equals_fc_action() {
        let (lk, y) = toy_kernel(11, 6, 12, 3, 3);
        let k = lk.block(1, 1);
        let single = PatchMatrix::from_dense(&k);
        let (q, qbar) = (0.23, 0.81);
        let qm = DMatrix::from_element(1, 1, q);
        let qbm = DMatrix::from_element(1, 1, qbar);
        for beta in [Beta::Finite(50.0), Beta::Infinite] {
            let a = fc_action(q, qbar, &k, &y, 0.7, beta, 1.4).unwrap();
            let b = cnn_action(&qm, &qbm, &single, &y, 0.7, beta, 1.4).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lcn_action_matches_cnn_on_block_diagonal_kernel() {
        let (lk, y) = toy_kernel(13, 5, 12, 3, 3);
        let blocked = lk.zero_off_diagonal_blocks();
        let np = lk.n_patches();
        let qd = DVector::from_fn(np, |i, _| 0.1 + 0.05 * i as f64);
        let qbd = DVector::from_fn(np, |i, _| 0.9 - 0.03 * i as f64);
        let a = lcn_action(&qd, &qbd, &blocked, &y, 0.5, Beta::Finite(100.0), 1.0).unwrap();
        let b = cnn_action(
            &DMatrix::from_diagonal(&qd),
            &DMatrix::from_diagonal(&qbd),
            &blocked,
            &y,
            0.5,
            Beta::Finite(100.0),
            1.0,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn zero_alpha_solution_is_infinite_width_point() {
        let (lk, y) = toy_kernel(17, 5, 12, 3, 3);
        let sol = solve_saddle(
            Architecture::Convolutional,
            &lk,
            &y,
            0.0,
            Beta::Infinite,
            1.0,
            &SaddleOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
        let np = lk.n_patches();
        assert!(linalg::max_abs_diff(&sol.qbar, &DMatrix::identity(np, np)) < 1e-10);
        assert!(sol.q.abs().max() < 1e-10);
    }

    #[test]
    fn alpha_zero_action_is_minimized_at_infinite_width_point() {
        let (lk, y) = toy_kernel(19, 4, 12, 3, 3);
        let k = lk.block(0, 0);
        let at = |q: f64, qbar: f64| fc_action(q, qbar, &k, &y, 0.0, Beta::Infinite, 1.0).unwrap();
        let s0 = at(0.0, 1.0);
        for (dq, dqb) in [(1e-4, 0.0), (-1e-4, 0.0), (0.0, 1e-4), (0.0, -1e-4)] {
            // Stationary point: first-order variations vanish.
            let splus = at(dq, 1.0 + dqb);
            let sminus = at(-dq, 1.0 - dqb);
            assert!(((splus - sminus) / 2e-4).abs() < 1e-6);
        }
        assert!((s0 - (-0.0 + 1.0f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn fc_solver_matches_closed_form_at_zero_temperature() {
        let (lk, y) = toy_kernel(23, 8, 16, 16, 16);
        assert_eq!(lk.n_patches(), 1);
        let k = lk.block(0, 0);
        for alpha in [0.2, 0.7, 1.5, 4.0] {
            let sol = solve_saddle(
                Architecture::FullyConnected,
                &lk,
                &y,
                alpha,
                Beta::Infinite,
                1.0,
                &SaddleOptions::default(),
            )
            .unwrap();
            assert!(sol.converged, "alpha {alpha}");
            let want = fc_qbar_closed_form(&k, &y, alpha, 1.0).unwrap();
            assert!(
                (sol.qbar_scalar() - want).abs() < 1e-7,
                "alpha {alpha}: {} vs {want}",
                sol.qbar_scalar()
            );
        }
    }

    #[test]
    fn lcn_solution_stays_diagonal() {
        let (lk, y) = toy_kernel(29, 6, 12, 3, 3);
        let sol = solve_saddle(
            Architecture::LocallyConnected,
            &lk,
            &y,
            0.8,
            Beta::Finite(1e3),
            1.0,
            &SaddleOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
        for i in 0..lk.n_patches() {
            for j in 0..lk.n_patches() {
                if i != j {
                    assert_eq!(sol.qbar[(i, j)], 0.0);
                    assert_eq!(sol.q[(i, j)], 0.0);
                }
            }
        }
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn solver_is_deterministic() {
        let (lk, y) = toy_kernel(31, 6, 12, 3, 3);
        let run = || {
            solve_saddle(
                Architecture::Convolutional,
                &lk,
                &y,
                0.9,
                Beta::Infinite,
                1.0,
                &SaddleOptions::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.qbar, b.qbar);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn perturbative_qbar_shape_and_symmetry() {
        let (lk, y) = toy_kernel(37, 6, 12, 3, 3);
        let d = perturbative_delta_qbar(&lk, &y, 1.0).unwrap();
        assert_eq!(d.nrows(), lk.n_patches());
        assert!(linalg::max_abs_diff(&d, &d.transpose()) < 1e-14);
        // y = 0 leaves only the negative trace term.
        let zero = DVector::zeros(6);
        let d0 = perturbative_delta_qbar(&lk, &zero, 1.0).unwrap();
        for i in 0..lk.n_patches() {
            assert!(d0[(i, i)] < 0.0);
        }
    }

    #[test]
    fn fc_perturbative_matches_closed_form_expansion() {
        // For FC the closed form expands as Qbar = 1 + alpha (g - 1) + O(alpha^2),
        // and delta Qbar = (1/P)(yt^T Kn yt - Tr(Kn K^{-1})) with Kn = K/lambda1
        // equals g - 1 exactly.
        let (lk, y) = toy_kernel(41, 7, 14, 14, 14);
        let k = lk.block(0, 0);
        let lambda1 = 1.9;
        let d = perturbative_delta_qbar(&lk, &y, lambda1).unwrap()[(0, 0)];
        let factor = SpdFactor::new(&k, 0.0, true).unwrap();
        let g = lambda1 * y.dot(&factor.solve_vec(&y)) / 7.0;
        assert!((d - (g - 1.0)).abs() < 1e-9, "{d} vs {}", g - 1.0);
    }
}
