//! Theory-side pipeline shared by the subcommands: kernel construction with
//! on-disk caching, saddle solving, the finite-width similarity shift, and
//! per-point predictor statistics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use fwnet_core::io;
use fwnet_core::kernel::{
    kernel_from_local, local_covariance, prior_similarity, test_kernel_vectors,
};
use fwnet_core::predictor::{predict_point, theory_delta_k_cnn, theory_delta_k_fc, PredictorStats};
use fwnet_core::saddle::{renormalized_kernel, solve_saddle};
use fwnet_core::{
    Activation, Architecture, Beta, ConvGeometry, Dataset, LocalKernel, SaddleOptions,
    SaddleSolution,
};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// Everything the analytic half needs besides the data: architecture,
/// geometry, activation, priors, and the quadrature order.
#[derive(Debug, Clone)]
pub struct Theory {
    pub architecture: Architecture,
    pub geometry: ConvGeometry,
    pub activation: Activation,
    pub lambda0: f64,
    pub lambda1: f64,
    pub order: usize,
}

impl Theory {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            architecture: cfg.architecture()?,
            geometry: cfg.geometry()?,
            activation: cfg.activation()?,
            lambda0: cfg.model.lambda0,
            lambda1: cfg.model.lambda1,
            order: cfg.model.order,
        })
    }

    /// Total hidden width: channels times patches (single-patch geometry
    /// makes this the plain fully-connected width).
    pub fn n1(&self, channels: usize) -> usize {
        channels * self.geometry.patch_count()
    }

    /// Infinite-width patch kernel of the training inputs.
    pub fn kernel(&self, x: &DMatrix<f64>) -> Result<LocalKernel> {
        let cov = local_covariance(x, &self.geometry, self.lambda0)?;
        Ok(kernel_from_local(&cov, self.activation, self.order))
    }

    /// Prior expectation of the measured similarity matrix: the
    /// patch-averaged diagonal kernel, without the readout prior factor.
    pub fn prior_reference(&self, lk: &LocalKernel) -> DMatrix<f64> {
        prior_similarity(lk)
    }

    pub fn solve(
        &self,
        lk: &LocalKernel,
        y: &DVector<f64>,
        alpha: f64,
        beta: Beta,
        opts: &SaddleOptions,
    ) -> Result<SaddleSolution> {
        solve_saddle(self.architecture, lk, y, alpha, beta, self.lambda1, opts)
            .map_err(CliError::from)
    }

    /// Predicted finite-width shift of the measured similarity matrix in
    /// the same normalization as the sampler's `Phi Phi^T / N1` average.
    /// The convolutional formula is stated per patch pair, so it is divided
    /// by the patch count here; the locally-connected shift has no closed
    /// form in this pipeline and reports `None`.
    pub fn similarity_shift(
        &self,
        lk: &LocalKernel,
        sol: &SaddleSolution,
        y: &DVector<f64>,
        channels: usize,
        beta: Beta,
    ) -> Result<Option<DMatrix<f64>>> {
        let n1 = self.n1(channels);
        match self.architecture {
            Architecture::FullyConnected => {
                let d = theory_delta_k_fc(
                    &lk.block(0, 0),
                    y,
                    sol.qbar_scalar(),
                    self.lambda1,
                    n1,
                    beta,
                )?;
                Ok(Some(d.entries))
            }
            Architecture::Convolutional => {
                let k_r =
                    renormalized_kernel(Architecture::Convolutional, lk, &sol.qbar, self.lambda1);
                let d = theory_delta_k_cnn(lk, &sol.qbar, &k_r, y, self.lambda1, n1, beta)?;
                Ok(Some(d.entries / lk.n_patches() as f64))
            }
            Architecture::LocallyConnected => Ok(None),
        }
    }

    /// Predictor statistics at one held-out input under a given order
    /// parameter.
    pub fn point_stats(
        &self,
        lk: &LocalKernel,
        train: &Dataset,
        qbar: &DMatrix<f64>,
        x0: &DVector<f64>,
        y0: f64,
        beta: Beta,
    ) -> Result<PredictorStats> {
        let tv = test_kernel_vectors(
            &train.x,
            x0,
            &self.geometry,
            self.lambda0,
            self.activation,
            self.order,
        )?;
        predict_point(self.architecture, lk, &tv, qbar, &train.y, y0, beta, self.lambda1)
            .map_err(CliError::from)
    }

    /// Mean predicted generalization error over a held-out set.
    pub fn test_loss(
        &self,
        lk: &LocalKernel,
        train: &Dataset,
        qbar: &DMatrix<f64>,
        test: &Dataset,
        beta: Beta,
    ) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..test.p() {
            let x0 = test.x.row(i).transpose();
            sum += self.point_stats(lk, train, qbar, &x0, test.y[i], beta)?.gen_error;
        }
        Ok(sum / test.p() as f64)
    }
}

/// Load the kernel from `path` when a cache file is already there (checking
/// that it matches the requested kernel), otherwise compute and save it.
/// The boolean reports whether the cache was used.
pub fn ensure_kernel(
    theory: &Theory,
    x: &DMatrix<f64>,
    path: &Path,
) -> Result<(LocalKernel, bool)> {
    if path.exists() {
        let rec = io::load_kernel(path)?;
        if rec.activation != theory.activation
            || rec.lambda0 != theory.lambda0
            || rec.geometry != theory.geometry
            || rec.kernel.n_patterns() != x.nrows()
        {
            return Err(CliError::config(format!(
                "kernel cache {} does not match the configuration; remove it to recompute",
                path.display()
            )));
        }
        Ok((rec.kernel, true))
    } else {
        let lk = theory.kernel(x)?;
        io::save_kernel(path, &lk, theory.activation, theory.lambda0, &theory.geometry)?;
        Ok((lk, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fwnet_core::data::generate_linear_teacher;

    fn fc_theory(n0: usize) -> Theory {
        Theory {
            architecture: Architecture::FullyConnected,
            geometry: ConvGeometry::fully_connected(n0).unwrap(),
            activation: Activation::Erf,
            lambda0: 1.0,
            lambda1: 1.3,
            order: 80,
        }
    }

    #[test]
    fn single_patch_conv_shift_equals_fully_connected_shift() {
        let ds = generate_linear_teacher(6, 10, 5).unwrap();
        let fc = fc_theory(10);
        let cnn = Theory { architecture: Architecture::Convolutional, ..fc.clone() };
        let lk = fc.kernel(&ds.x).unwrap();
        let opts = SaddleOptions::default();
        let sol_fc = fc.solve(&lk, &ds.y, 1.5, Beta::Finite(25.0), &opts).unwrap();
        let sol_cnn = cnn.solve(&lk, &ds.y, 1.5, Beta::Finite(25.0), &opts).unwrap();
        let d_fc = fc
            .similarity_shift(&lk, &sol_fc, &ds.y, 12, Beta::Finite(25.0))
            .unwrap()
            .unwrap();
        let d_cnn = cnn
            .similarity_shift(&lk, &sol_cnn, &ds.y, 12, Beta::Finite(25.0))
            .unwrap()
            .unwrap();
        assert!((&d_fc - &d_cnn).abs().max() < 1e-8);
    }

    #[test]
    fn kernel_cache_round_trips_and_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernel.bin");
        let ds = generate_linear_teacher(5, 10, 3).unwrap();
        let theory = fc_theory(10);
        let (lk, cached) = ensure_kernel(&theory, &ds.x, &path).unwrap();
        assert!(!cached);
        let (lk2, cached) = ensure_kernel(&theory, &ds.x, &path).unwrap();
        assert!(cached);
        assert_eq!(lk.packed(), lk2.packed());
        let other = Theory { lambda0: 2.0, ..theory };
        let err = ensure_kernel(&other, &ds.x, &path).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn locally_connected_shift_is_absent() {
        let ds = generate_linear_teacher(6, 12, 7).unwrap();
        let theory = Theory {
            architecture: Architecture::LocallyConnected,
            geometry: ConvGeometry::one_dim(12, 4, 4).unwrap(),
            activation: Activation::Erf,
            lambda0: 1.0,
            lambda1: 1.0,
            order: 80,
        };
        let lk = theory.kernel(&ds.x).unwrap();
        let sol = theory
            .solve(&lk, &ds.y, 1.0, Beta::Infinite, &SaddleOptions::default())
            .unwrap();
        assert!(theory
            .similarity_shift(&lk, &sol, &ds.y, 8, Beta::Infinite)
            .unwrap()
            .is_none());
    }
}
