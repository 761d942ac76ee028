//! Fast invariant suite: self-contained checks of the analytic kernels, the
//! saddle solver, the predictor, and the sampling prior, each scaled to run
//! in seconds to a minute. The same functions back the `verify` subcommand
//! and the acceptance test target, so the report and the gate cannot drift
//! apart.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use fwnet_core::data::{generate_linear_teacher, seeded_rng};
use fwnet_core::kernel::{
    averaged_kernel, global_covariance, kernel_from_covariance, kernel_from_local, kernel_map,
    kernel_map_quadrature, local_covariance, prior_similarity, test_kernel_vectors,
};
use fwnet_core::oracle::similarity::phi_similarity;
use fwnet_core::oracle::{hidden_activations, init_params, BatchInputs, NetConfig};
use fwnet_core::predictor::{predict_point, theory_delta_k_cnn, theory_delta_k_fc};
use fwnet_core::saddle::{
    cnn_action, fc_action, lcn_action, perturbative_qbar, renormalize_cnn, renormalize_fc,
    renormalize_lcn, solve_saddle,
};
use fwnet_core::stats::log_log_slope;
use fwnet_core::{Activation, Architecture, Beta, ConvGeometry, LocalKernel, SaddleOptions};

use crate::Result;

/// Result of one invariant check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub criterion: usize,
    pub module: &'static str,
    pub invariant: &'static str,
    pub passed: bool,
    pub observed: String,
    pub bound: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {}: {} ({}: {}, observed {}, bound {}, {:.1}s)",
            self.criterion,
            if self.passed { "pass" } else { "fail" },
            self.module,
            self.invariant,
            self.observed,
            self.bound,
            self.seconds
        )
    }
}

const QUAD_ORDER: usize = 320;

fn erf_kernel(x: &DMatrix<f64>, geom: &ConvGeometry, lambda0: f64) -> LocalKernel {
    let cov = local_covariance(x, geom, lambda0).expect("geometry matches data");
    kernel_from_local(&cov, Activation::Erf, QUAD_ORDER)
}

fn max_block_diff(a: &LocalKernel, b: &LocalKernel) -> f64 {
    let mut worst: f64 = 0.0;
    for (va, vb) in a.packed().iter().zip(b.packed().iter()) {
        worst = worst.max((va - vb).abs());
    }
    worst
}

/// Monte Carlo estimate of the prior similarity `E[Phi Phi^T / N1]` with a
/// per-entry standard error.
fn mc_prior(
    cfg: &NetConfig,
    x: &DMatrix<f64>,
    lambda0: f64,
    draws: usize,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let inputs = BatchInputs::new(cfg, x).expect("inputs match geometry");
    let p = x.nrows();
    let mut rng = seeded_rng(seed);
    let mut sum: DMatrix<f64> = DMatrix::zeros(p, p);
    let mut sumsq: DMatrix<f64> = DMatrix::zeros(p, p);
    for _ in 0..draws {
        let params = init_params(cfg, lambda0, 1.0, &mut rng);
        let o = phi_similarity(&hidden_activations(cfg, &inputs, &params).phi);
        for r in 0..p {
            for c in 0..p {
                let v = o[(r, c)];
                sum[(r, c)] += v;
                sumsq[(r, c)] += v * v;
            }
        }
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = DMatrix::from_fn(p, p, |r, c| {
        ((sumsq[(r, c)] / n - mean[(r, c)] * mean[(r, c)]).max(0.0) / n).sqrt()
    });
    (mean, se)
}

fn worst_sigma(mean: &DMatrix<f64>, se: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..mean.nrows() {
        for c in 0..mean.ncols() {
            worst = worst.max((mean[(r, c)] - reference[(r, c)]).abs() / (se[(r, c)] + 1e-300));
        }
    }
    worst
}

/// Kernel correctness: the linear-activation kernel is the covariance, the
/// closed-form erf kernel matches quadrature on random positive-definite
/// blocks, and finite ensembles of untrained networks reproduce the
/// analytic prior kernels for all three architectures.
pub fn criterion_1(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut observed = Vec::new();
    let mut passed = true;

    let ds = generate_linear_teacher(16, 12, seed).expect("dataset");
    let geom = ConvGeometry::one_dim(12, 4, 4).expect("geometry");
    let lambda0 = 1.7;
    let cov = local_covariance(&ds.x, &geom, lambda0).expect("covariance");
    let lin = kernel_from_local(&cov, Activation::Linear, QUAD_ORDER);
    let lin_diff = max_block_diff(&lin, &cov);
    let glob = global_covariance(&ds.x, lambda0);
    let glob_diff = (kernel_from_covariance(&glob, Activation::Linear, QUAD_ORDER) - &glob)
        .abs()
        .max();
    let linear_worst = lin_diff.max(glob_diff);
    passed &= linear_worst <= 1e-12;
    observed.push(format!("linear {linear_worst:.2e}"));

    let mut rng = seeded_rng(seed.wrapping_add(1));
    let mut erf_worst: f64 = 0.0;
    for _ in 0..100 {
        let a = (2.0 * rng.gen::<f64>() - 1.0).exp();
        let c = (2.0 * rng.gen::<f64>() - 1.0).exp();
        let rho = 1.96 * rng.gen::<f64>() - 0.98;
        let b = rho * (a * c).sqrt();
        let closed = kernel_map(a, c, b, Activation::Erf, QUAD_ORDER);
        let quad = kernel_map_quadrature(a, c, b, Activation::Erf, QUAD_ORDER);
        erf_worst = erf_worst.max((closed - quad).abs());
    }
    passed &= erf_worst <= 1e-8;
    observed.push(format!("erf-vs-quadrature {erf_worst:.2e}"));

    let draws = 10_000;
    let prior = generate_linear_teacher(5, 12, seed.wrapping_add(2)).expect("dataset");
    let mut sigma_worst: f64 = 0.0;
    for (label, arch, channels) in [
        ("fc", Architecture::FullyConnected, 60usize),
        ("lcn", Architecture::LocallyConnected, 40),
        ("cnn", Architecture::Convolutional, 40),
    ] {
        let (net_geom, reference) = if arch == Architecture::FullyConnected {
            let g = ConvGeometry::fully_connected(12).expect("geometry");
            let k = kernel_from_covariance(&glob_of(&prior.x, lambda0), Activation::Erf, QUAD_ORDER);
            (g, k)
        } else {
            (geom, prior_similarity(&erf_kernel(&prior.x, &geom, lambda0)))
        };
        let cfg = NetConfig::new(arch, net_geom, channels, Activation::Erf).expect("net");
        let (mean, se) = mc_prior(&cfg, &prior.x, lambda0, draws, seed.wrapping_add(3));
        let s = worst_sigma(&mean, &se, &reference);
        sigma_worst = sigma_worst.max(s);
        observed.push(format!("{label} {s:.2}se"));
    }
    passed &= sigma_worst <= 4.0;

    CheckOutcome {
        criterion: 1,
        module: "kernel",
        invariant: "analytic kernels match covariance, quadrature, and prior sampling",
        passed,
        observed: observed.join(", "),
        bound: "1e-12 / 1e-8 / 4 se".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn glob_of(x: &DMatrix<f64>, lambda0: f64) -> DMatrix<f64> {
    global_covariance(x, lambda0)
}

/// Infinite-width limit: at zero load the saddle is the identity and the
/// identity-renormalized kernel is the patch-averaged kernel.
pub fn criterion_2(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let ds = generate_linear_teacher(20, 12, seed).expect("dataset");
    let geom = ConvGeometry::one_dim(12, 4, 4).expect("geometry");
    let lk = erf_kernel(&ds.x, &geom, 1.0);
    let fc_geom = ConvGeometry::fully_connected(12).expect("geometry");
    let fc_lk = erf_kernel(&ds.x, &fc_geom, 1.0);
    let opts = SaddleOptions::default();
    let lambda1 = 1.3;

    let mut qbar_worst: f64 = 0.0;
    for (arch, kernel) in [
        (Architecture::Convolutional, &lk),
        (Architecture::LocallyConnected, &lk),
        (Architecture::FullyConnected, &fc_lk),
    ] {
        let sol = solve_saddle(arch, kernel, &ds.y, 0.0, Beta::Infinite, lambda1, &opts)
            .expect("solve at zero load");
        let np = kernel.n_patches();
        let diff = (&sol.qbar - DMatrix::identity(np, np)).abs().max();
        qbar_worst = qbar_worst.max(diff);
    }

    let np = lk.n_patches();
    let ren = renormalize_cnn(&lk, &DMatrix::identity(np, np), lambda1);
    let avg_diff = (ren - averaged_kernel(&lk, lambda1)).abs().max();

    let passed = qbar_worst <= 1e-10 && avg_diff <= 1e-12;
    CheckOutcome {
        criterion: 2,
        module: "saddle",
        invariant: "zero load gives the identity order parameter and the averaged kernel",
        passed,
        observed: format!("|qbar - 1| {qbar_worst:.2e}, kernel {avg_diff:.2e}"),
        bound: "1e-10 / 1e-12".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Perturbative consistency: the distance between the solver output and the
/// first-order small-load expansion shrinks quadratically in the load.
pub fn criterion_3(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let geom = ConvGeometry::one_dim(16, 4, 4).expect("geometry");
    let opts = SaddleOptions { tol: 1e-12, max_iter: 5000, ..SaddleOptions::default() };
    let lambda1 = 1.5;
    let alphas: Vec<f64> =
        (0..5).map(|i| 1e-3 * 30f64.powf(i as f64 / 4.0)).collect();
    let mut slopes = Vec::new();
    let mut passed = true;
    for d in 0..5 {
        let ds = generate_linear_teacher(32, 16, seed.wrapping_add(d)).expect("dataset");
        let lk = erf_kernel(&ds.x, &geom, 1.0);
        let mut pts = Vec::new();
        for &alpha in &alphas {
            let sol = solve_saddle(
                Architecture::Convolutional,
                &lk,
                &ds.y,
                alpha,
                Beta::Infinite,
                lambda1,
                &opts,
            )
            .expect("solve");
            let reference = perturbative_qbar(&lk, &ds.y, alpha, lambda1).expect("expansion");
            pts.push((alpha, (&sol.qbar - reference).abs().max()));
        }
        let fit = log_log_slope(&pts).expect("five points");
        passed &= (fit.slope - 2.0).abs() <= 0.3;
        slopes.push(format!("{:.3}", fit.slope));
    }
    CheckOutcome {
        criterion: 3,
        module: "saddle",
        invariant: "solver deviation from the first-order expansion is quadratic in load",
        passed,
        observed: format!("slopes {}", slopes.join(" ")),
        bound: "2.0 +- 0.3".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Architectural reductions: the convolutional pipeline on single-patch
/// geometry reproduces the fully connected one, and the locally connected
/// pipeline equals the convolutional one with off-diagonal blocks removed.
pub fn criterion_4(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let opts = SaddleOptions { tol: 1e-12, max_iter: 5000, ..SaddleOptions::default() };

    // Single patch: convolutional vs fully connected.
    let ds = generate_linear_teacher(20, 12, seed).expect("dataset");
    let geom = ConvGeometry::fully_connected(12).expect("geometry");
    let lk = erf_kernel(&ds.x, &geom, 1.0);
    let k = lk.block(0, 0);
    let (alpha, lambda1) = (1.3, 1.4);
    let tests = generate_linear_teacher(4, 12, seed.wrapping_add(9)).expect("dataset");
    for beta in [Beta::Infinite, Beta::Finite(30.0)] {
        let fc = solve_saddle(Architecture::FullyConnected, &lk, &ds.y, alpha, beta, lambda1, &opts)
            .expect("fc solve");
        let cnn =
            solve_saddle(Architecture::Convolutional, &lk, &ds.y, alpha, beta, lambda1, &opts)
                .expect("cnn solve");
        worst = worst.max((fc.qbar_scalar() - cnn.qbar[(0, 0)]).abs());
        worst = worst.max((fc.q_scalar() - cnn.q[(0, 0)]).abs());
        let s_fc = fc_action(fc.q_scalar(), fc.qbar_scalar(), &k, &ds.y, alpha, beta, lambda1)
            .expect("action");
        let s_cnn =
            cnn_action(&cnn.q, &cnn.qbar, &lk, &ds.y, alpha, beta, lambda1).expect("action");
        worst = worst.max((s_fc - s_cnn).abs());
        for (q, qb) in [(0.2, 0.9), (0.5, 0.7), (1.2, 0.45)] {
            let a = fc_action(q, qb, &k, &ds.y, alpha, beta, lambda1).expect("action");
            let b = cnn_action(
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, qb),
                &lk,
                &ds.y,
                alpha,
                beta,
                lambda1,
            )
            .expect("action");
            worst = worst.max((a - b).abs());
        }
        let kr_fc = renormalize_fc(&k, fc.qbar_scalar(), lambda1);
        let kr_cnn = renormalize_cnn(&lk, &cnn.qbar, lambda1);
        worst = worst.max((&kr_fc - &kr_cnn).abs().max());
        for t in 0..tests.p() {
            let x0 = tests.x.row(t).transpose();
            let tv = test_kernel_vectors(&ds.x, &x0, &geom, 1.0, Activation::Erf, QUAD_ORDER)
                .expect("test vectors");
            let pf = predict_point(
                Architecture::FullyConnected,
                &lk,
                &tv,
                &fc.qbar,
                &ds.y,
                tests.y[t],
                beta,
                lambda1,
            )
            .expect("predict");
            let pc = predict_point(
                Architecture::Convolutional,
                &lk,
                &tv,
                &cnn.qbar,
                &ds.y,
                tests.y[t],
                beta,
                lambda1,
            )
            .expect("predict");
            worst = worst.max((pf.gamma - pc.gamma).abs());
            worst = worst.max((pf.sigma2 - pc.sigma2).abs());
        }
        let d_fc =
            theory_delta_k_fc(&k, &ds.y, fc.qbar_scalar(), lambda1, 24, beta).expect("shift");
        let d_cnn = theory_delta_k_cnn(&lk, &cnn.qbar, &kr_cnn, &ds.y, lambda1, 24, beta)
            .expect("shift");
        worst = worst.max((&d_fc.entries - &d_cnn.entries).abs().max());
    }
    let single_patch_worst = worst;

    // Multi-patch: locally connected vs off-diagonal-zeroed convolutional.
    let ds2 = generate_linear_teacher(24, 12, seed.wrapping_add(1)).expect("dataset");
    let geom2 = ConvGeometry::one_dim(12, 4, 4).expect("geometry");
    let lk2 = erf_kernel(&ds2.x, &geom2, 1.0);
    let lkz = lk2.zero_off_diagonal_blocks();
    let mut lcn_worst: f64 = 0.0;
    for beta in [Beta::Infinite, Beta::Finite(25.0)] {
        let lcn = solve_saddle(
            Architecture::LocallyConnected,
            &lk2,
            &ds2.y,
            1.6,
            beta,
            1.2,
            &opts,
        )
        .expect("lcn solve");
        let cnnz =
            solve_saddle(Architecture::Convolutional, &lkz, &ds2.y, 1.6, beta, 1.2, &opts)
                .expect("cnn solve");
        lcn_worst = lcn_worst.max((&lcn.qbar - &cnnz.qbar).abs().max());
        let kr_l = renormalize_lcn(&lk2, &lcn.qbar.diagonal(), 1.2);
        let kr_c = renormalize_cnn(&lkz, &cnnz.qbar, 1.2);
        lcn_worst = lcn_worst.max((&kr_l - &kr_c).abs().max());
        let s_l = lcn_action(
            &lcn.q.diagonal(),
            &lcn.qbar.diagonal(),
            &lk2,
            &ds2.y,
            1.6,
            beta,
            1.2,
        )
        .expect("action");
        let s_c = cnn_action(&cnnz.q, &cnnz.qbar, &lkz, &ds2.y, 1.6, beta, 1.2).expect("action");
        lcn_worst = lcn_worst.max((s_l - s_c).abs());
    }

    let passed = single_patch_worst <= 1e-8 && lcn_worst <= 1e-8;
    CheckOutcome {
        criterion: 4,
        module: "saddle",
        invariant: "single-patch conv equals fc; lcn equals off-diagonal-zeroed conv",
        passed,
        observed: format!("fc {single_patch_worst:.2e}, lcn {lcn_worst:.2e}"),
        bound: "1e-8".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Brute-force saddle oracle: exhaustive grid minimization of the effective
/// action on a two-pattern, two-patch instance lands on the solver output
/// within the grid resolution.
pub fn criterion_5(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    // Two patterns with one label of each class, scanned deterministically.
    let mut ds = None;
    for extra in 0..64 {
        let cand = generate_linear_teacher(2, 8, seed.wrapping_add(extra)).expect("dataset");
        if cand.y[0] != cand.y[1] {
            ds = Some(cand);
            break;
        }
    }
    let ds = ds.expect("a mixed-label pair exists within 64 seeds");
    let geom = ConvGeometry::one_dim(8, 4, 4).expect("geometry");
    let lk = erf_kernel(&ds.x, &geom, 1.0);
    let (alpha, lambda1) = (1.5, 1.0);
    let opts = SaddleOptions { tol: 1e-12, max_iter: 5000, ..SaddleOptions::default() };
    let sol = solve_saddle(
        Architecture::Convolutional,
        &lk,
        &ds.y,
        alpha,
        Beta::Infinite,
        lambda1,
        &opts,
    )
    .expect("solve");

    // Qbar grid: diagonal entries over (0, 2] and the off-diagonal over
    // [-1, 1], step 0.01 on every axis. Q is eliminated through the
    // stationarity substitution Q = Qbar^{-1} - I, so the scan is over the
    // positive-definite symmetric Qbar alone.
    let step = 0.01;
    let diag: Vec<f64> = (1..=200).map(|i| i as f64 * step).collect();
    let off: Vec<f64> = (-100..=100).map(|i| i as f64 * step).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for &a in &diag {
        for &c in &diag {
            let det_floor = 1e-12;
            for &b in &off {
                let det = a * c - b * b;
                if det <= det_floor {
                    continue;
                }
                // Q = Qbar^{-1} - I for a symmetric 2x2 Qbar.
                let q = DMatrix::from_row_slice(
                    2,
                    2,
                    &[c / det - 1.0, -b / det, -b / det, a / det - 1.0],
                );
                let qbar = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
                if let Ok(s) =
                    cnn_action(&q, &qbar, &lk, &ds.y, alpha, Beta::Infinite, lambda1)
                {
                    if s < best.0 {
                        best = (s, a, b, c);
                    }
                }
            }
        }
    }
    let diffs = [
        (sol.qbar[(0, 0)] - best.1).abs(),
        (sol.qbar[(0, 1)] - best.2).abs(),
        (sol.qbar[(1, 1)] - best.3).abs(),
    ];
    let worst = diffs.iter().cloned().fold(0.0f64, f64::max);
    let passed = worst <= step + 1e-9 && sol.converged;
    CheckOutcome {
        criterion: 5,
        module: "saddle",
        invariant: "exhaustive action grid search agrees with the solver",
        passed,
        observed: format!("max entry gap {worst:.3e}"),
        bound: format!("{step}"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Bias invariance: at zero temperature the fully connected posterior mean
/// is independent of the order parameter, while a convolutional network
/// with a non-scalar order parameter shows a genuine dependence.
pub fn criterion_6(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let geom = ConvGeometry::fully_connected(16).expect("geometry");
    let mut rng = seeded_rng(seed.wrapping_add(77));
    let mut fc_worst: f64 = 0.0;
    for i in 0..20 {
        let ds = generate_linear_teacher(10, 16, seed.wrapping_add(i)).expect("dataset");
        let lk = erf_kernel(&ds.x, &geom, 1.0);
        let lambda1 = rng.gen_range(0.5..2.0);
        let probe = generate_linear_teacher(1, 16, seed.wrapping_add(1000 + i)).expect("probe");
        let x0 = probe.x.row(0).transpose();
        let tv = test_kernel_vectors(&ds.x, &x0, &geom, 1.0, Activation::Erf, QUAD_ORDER)
            .expect("test vectors");
        let mut gammas = Vec::new();
        for qb in [0.1, 1.0, 10.0] {
            let st = predict_point(
                Architecture::FullyConnected,
                &lk,
                &tv,
                &DMatrix::from_element(1, 1, qb),
                &ds.y,
                probe.y[0],
                Beta::Infinite,
                lambda1,
            )
            .expect("predict");
            gammas.push(st.gamma);
        }
        let scale = gammas[1].abs().max(1e-12);
        let spread = (gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - gammas.iter().cloned().fold(f64::INFINITY, f64::min))
            / scale;
        fc_worst = fc_worst.max(spread);
    }

    // Overlapping masks give a strongly non-scalar order parameter.
    let geom2 = ConvGeometry::one_dim(12, 5, 2).expect("geometry");
    let ds = generate_linear_teacher(18, 12, seed.wrapping_add(40)).expect("dataset");
    let lk = erf_kernel(&ds.x, &geom2, 1.0);
    let opts = SaddleOptions::default();
    let sol = solve_saddle(
        Architecture::Convolutional,
        &lk,
        &ds.y,
        3.0,
        Beta::Infinite,
        2.0,
        &opts,
    )
    .expect("solve");
    let np = lk.n_patches();
    let mut off_max: f64 = 0.0;
    for i in 0..np {
        for j in 0..np {
            if i != j {
                off_max = off_max.max(sol.qbar[(i, j)].abs());
            }
        }
    }
    let probe = generate_linear_teacher(1, 12, seed.wrapping_add(90)).expect("probe");
    let x0 = probe.x.row(0).transpose();
    let tv = test_kernel_vectors(&ds.x, &x0, &geom2, 1.0, Activation::Erf, QUAD_ORDER)
        .expect("test vectors");
    let g_solved = predict_point(
        Architecture::Convolutional,
        &lk,
        &tv,
        &sol.qbar,
        &ds.y,
        probe.y[0],
        Beta::Infinite,
        2.0,
    )
    .expect("predict")
    .gamma;
    let g_identity = predict_point(
        Architecture::Convolutional,
        &lk,
        &tv,
        &DMatrix::identity(np, np),
        &ds.y,
        probe.y[0],
        Beta::Infinite,
        2.0,
    )
    .expect("predict")
    .gamma;
    let cnn_change = (g_solved - g_identity).abs() / g_identity.abs().max(1e-12);

    let passed = fc_worst <= 1e-10 && off_max > 1e-3 && cnn_change > 1e-3;
    CheckOutcome {
        criterion: 6,
        module: "predictor",
        invariant: "zero-temperature bias ignores the scalar order parameter, not the matrix one",
        passed,
        observed: format!(
            "fc spread {fc_worst:.2e}, qbar offdiag {off_max:.2e}, cnn change {cnn_change:.2e}"
        ),
        bound: "1e-10 / >1e-3".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Similarity-shift identity: the convolutional formula on single-patch
/// geometry collapses to the fully connected one.
pub fn criterion_7(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = seeded_rng(seed.wrapping_add(7));
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let ds = generate_linear_teacher(8, 10, seed.wrapping_add(200 + i)).expect("dataset");
        let geom = ConvGeometry::fully_connected(10).expect("geometry");
        let lk = erf_kernel(&ds.x, &geom, 1.0);
        let k = lk.block(0, 0);
        let qbar = rng.gen_range(0.3..3.0);
        let lambda1 = rng.gen_range(0.5..2.0);
        let beta = if i % 2 == 0 { Beta::Infinite } else { Beta::Finite(20.0 * (i as f64 + 1.0)) };
        let k_r = renormalize_fc(&k, qbar, lambda1);
        let d_cnn = theory_delta_k_cnn(
            &lk,
            &DMatrix::from_element(1, 1, qbar),
            &k_r,
            &ds.y,
            lambda1,
            16,
            beta,
        )
        .expect("shift");
        let d_fc = theory_delta_k_fc(&k, &ds.y, qbar, lambda1, 16, beta).expect("shift");
        worst = worst.max((&d_cnn.entries - &d_fc.entries).abs().max());
    }
    CheckOutcome {
        criterion: 7,
        module: "predictor",
        invariant: "single-patch conv similarity shift equals the fc shift",
        passed: worst <= 1e-9,
        observed: format!("max diff {worst:.2e}"),
        bound: "1e-9".into(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The fast suite: every invariant that runs in about a minute or less.
pub fn fast_criteria(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        criterion_1(seed),
        criterion_2(seed),
        criterion_3(seed),
        criterion_4(seed),
        criterion_5(seed),
        criterion_6(seed),
        criterion_7(seed),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_line_reports_module_and_observation() {
        let c = CheckOutcome {
            criterion: 3,
            module: "saddle",
            invariant: "demo",
            passed: false,
            observed: "slope 1.2".into(),
            bound: "2.0 +- 0.3".into(),
            seconds: 0.25,
        };
        let line = c.line();
        assert!(line.contains("criterion 3: fail"));
        assert!(line.contains("saddle"));
        assert!(line.contains("slope 1.2"));
    }
}
