//! Desk-scale cross-validation of the predictor against the sampler.
//!
//! A tiny linear network is sampled with Langevin dynamics at temperature
//! `T`, which draws from the Gibbs posterior at `beta = 1/T`. The posterior
//! mean and variance of the network output at held-out points must match the
//! renormalized-kernel predictor within Monte Carlo error plus an `O(1/N1)`
//! allowance for the finite hidden width the theory works at leading order
//! in.

use fwnet_core::kernel::{kernel_from_local, local_covariance, test_kernel_vectors};
use fwnet_core::oracle::{forward, sample_posterior, BatchInputs, NetConfig, Optimizer, TrainConfig};
use fwnet_core::predictor::predict_point;
use fwnet_core::stats::series_stats;
use fwnet_core::data::generate_linear_teacher;
use fwnet_core::{Activation, Architecture, Beta, ConvGeometry};

const P: usize = 8;
const N0: usize = 16;
const N1: usize = 8;
const LAMBDA0: f64 = 4.0;
const LAMBDA1: f64 = 4.0;
const TEMPERATURE: f64 = 0.05;

#[test]
fn linear_langevin_posterior_matches_predictor() {
    let ds = generate_linear_teacher(P, N0, 31).unwrap();
    let test = generate_linear_teacher(3, N0, 32).unwrap();
    let cfg = NetConfig::fully_connected(N0, N1, Activation::Linear).unwrap();
    let test_inputs = BatchInputs::new(&cfg, &test.x).unwrap();

    // Independent chains; each snapshot records the outputs at the held-out
    // points.
    let chains = 2;
    let mut series: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); test.p()]; chains];
    for chain in 0..chains {
        let tc = TrainConfig {
            optimizer: Optimizer::Langevin,
            eta: 0.01,
            temperature: TEMPERATURE,
            steps: 200_000,
            burn_in: 20_000,
            thin: 20,
            seed: 101 + chain as u64,
            train_bias: false,
        };
        let record = &mut series[chain];
        sample_posterior(&cfg, &ds, LAMBDA0, LAMBDA1, &tc, |_, params, _| {
            let f = forward(&cfg, &test_inputs, params);
            for (i, value) in f.iter().enumerate() {
                record[i].push(*value);
            }
        })
        .unwrap();
    }

    // Theory side: linear kernel, saddle point at load P/N1, renormalized
    // predictor at the inverse sampling temperature.
    let beta = Beta::Finite(1.0 / TEMPERATURE);
    let geom = ConvGeometry::fully_connected(N0).unwrap();
    let cov = local_covariance(&ds.x, &geom, LAMBDA0).unwrap();
    let lk = kernel_from_local(&cov, Activation::Linear, 40);
    let alpha = P as f64 / N1 as f64;
    let sol = fwnet_core::saddle::solve_saddle(
        Architecture::FullyConnected,
        &lk,
        &ds.y,
        alpha,
        beta,
        LAMBDA1,
        &fwnet_core::SaddleOptions::default(),
    )
    .unwrap();
    assert!(sol.converged);

    for i in 0..test.p() {
        let x0 = test.x.row(i).transpose();
        let tv = test_kernel_vectors(&ds.x, &x0, &geom, LAMBDA0, Activation::Linear, 40).unwrap();
        let stats =
            predict_point(Architecture::FullyConnected, &lk, &tv, &sol.qbar, &ds.y, test.y[i], beta, LAMBDA1)
                .unwrap();

        // Combine the chains: average of chain means, errors in quadrature.
        let per_chain: Vec<_> = series.iter().map(|c| series_stats(&c[i]).unwrap()).collect();
        let mc_mean = per_chain.iter().map(|s| s.mean).sum::<f64>() / chains as f64;
        let mc_se = per_chain.iter().map(|s| s.se * s.se).sum::<f64>().sqrt() / chains as f64;
        let mc_var = series
            .iter()
            .flat_map(|c| c[i].iter())
            .map(|v| (v - mc_mean) * (v - mc_mean))
            .sum::<f64>()
            / series.iter().map(|c| c[i].len()).sum::<usize>() as f64;

        let sigma = stats.sigma2.sqrt();
        let mean_band = 3.0 * mc_se + (stats.gamma.abs() + sigma) / N1 as f64;
        assert!(
            (mc_mean - stats.gamma).abs() <= mean_band,
            "point {i}: posterior mean {mc_mean:.4} vs predictor {:.4} (band {mean_band:.4})",
            stats.gamma
        );

        // Posterior variance: Monte Carlo error of a variance estimate is
        // roughly sigma^2 sqrt(2 / n_eff) per chain.
        let n_eff: f64 = per_chain.iter().map(|s| s.n_eff).sum();
        let var_se = mc_var * (2.0 / n_eff).sqrt();
        let var_band = 3.0 * var_se + 2.0 * stats.sigma2 / N1 as f64;
        assert!(
            (mc_var - stats.sigma2).abs() <= var_band,
            "point {i}: posterior variance {mc_var:.5} vs predictor {:.5} (band {var_band:.5})",
            stats.sigma2
        );
    }
}
