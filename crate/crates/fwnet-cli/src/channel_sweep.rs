//! Generalization against width at fixed data: the theory loss curve of a
//! convolutional network over a channel grid, the fully connected curve at
//! matched hidden width, both infinite-width baselines, and Monte Carlo
//! spot checks of the convolutional curve at selected widths.

use nalgebra::DMatrix;

use fwnet_core::stats::series_stats;
use fwnet_core::{Architecture, ConvGeometry};

use crate::config::ExperimentConfig;
use crate::ensemble::{run_ensemble, EnsembleSpec};
use crate::pipeline::Theory;
use crate::{CliError, Result};

/// One width of the sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub channels: usize,
    pub alpha: f64,
    pub converged: bool,
    /// Theory generalization loss of the convolutional network at the
    /// solved order parameter.
    pub cnn_loss: f64,
    /// Matched fully connected width `channels * patches`.
    pub fc_n1: usize,
    pub fc_converged: bool,
    /// Theory loss of the fully connected network at that width.
    pub fc_loss: f64,
    /// Monte Carlo spot check (NaN when this width has none): mean of the
    /// per-snapshot held-out squared error, its spread over samples, and
    /// the autocorrelation-corrected standard error of the mean.
    pub mc_mean: f64,
    pub mc_sd: f64,
    pub mc_se: f64,
    pub mc_chains: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Theory losses in the infinite-width limit (unrenormalized kernels).
    pub cnn_infinite: f64,
    pub fc_infinite: f64,
    /// Largest spot-check standard error of the mean; the yardstick for
    /// calling two points on the curve distinct.
    pub combined_sd: f64,
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd_of(v: &[f64]) -> f64 {
    let m = mean_of(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Run the sweep described by `cfg.channel_sweep` plus the shared sections.
pub fn run_channel_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    if cfg.architecture()? != Architecture::Convolutional {
        return Err(CliError::config("channel sweeps need model.architecture = \"cnn\""));
    }
    if cfg.channel_sweep.channels.is_empty() {
        return Err(CliError::config("channel-sweep.channels must list at least one width"));
    }
    let (train, test) = cfg.datasets()?;
    let test = test.ok_or_else(|| {
        CliError::config("channel sweeps need held-out points (data.test_p > 0)")
    })?;
    let beta = cfg.beta()?;
    let opts = cfg.saddle_options();
    let p = train.p() as f64;

    let cnn = Theory::from_config(cfg)?;
    let fc = Theory {
        architecture: Architecture::FullyConnected,
        geometry: ConvGeometry::fully_connected(cfg.data.n0).map_err(CliError::from)?,
        ..cnn.clone()
    };
    let lk = cnn.kernel(&train.x)?;
    let lk_fc = fc.kernel(&train.x)?;
    let np = lk.n_patches();

    let cnn_infinite =
        cnn.test_loss(&lk, &train, &DMatrix::identity(np, np), &test, beta)?;
    let fc_infinite = fc.test_loss(&lk_fc, &train, &DMatrix::identity(1, 1), &test, beta)?;

    let mut rows = Vec::with_capacity(cfg.channel_sweep.channels.len());
    for &c in &cfg.channel_sweep.channels {
        if c == 0 {
            return Err(CliError::config("channel counts must be positive"));
        }
        let alpha = p / c as f64;
        let sol = cnn.solve(&lk, &train.y, alpha, beta, &opts)?;
        let cnn_loss = cnn.test_loss(&lk, &train, &sol.qbar, &test, beta)?;
        let fc_n1 = c * np;
        let sol_fc = fc.solve(&lk_fc, &train.y, p / fc_n1 as f64, beta, &opts)?;
        let fc_loss = fc.test_loss(&lk_fc, &train, &sol_fc.qbar, &test, beta)?;
        rows.push(SweepRow {
            channels: c,
            alpha,
            converged: sol.converged,
            cnn_loss,
            fc_n1,
            fc_converged: sol_fc.converged,
            fc_loss,
            mc_mean: f64::NAN,
            mc_sd: f64::NAN,
            mc_se: f64::NAN,
            mc_chains: 0,
        });
    }

    let mut combined_sd = f64::NAN;
    for (idx, &c) in cfg.channel_sweep.mc_channels.iter().enumerate() {
        let row = rows
            .iter_mut()
            .find(|r| r.channels == c)
            .ok_or_else(|| {
                CliError::config(format!(
                    "mc_channels entry {c} is not in channel-sweep.channels"
                ))
            })?;
        let spec = EnsembleSpec {
            architecture: Architecture::Convolutional,
            geometry: cnn.geometry,
            channels: c,
            activation: cnn.activation,
            lambda0: cnn.lambda0,
            lambda1: cnn.lambda1,
        };
        let seed_base = cfg.data.seed.wrapping_add(0x100 * (idx as u64 + 1));
        let tc = cfg.train_config(seed_base)?;
        let outcomes = run_ensemble(&spec, &train, &tc, cfg.train.chains, Some(&test))?;
        let mut chain_means = Vec::with_capacity(outcomes.len());
        let mut se2_sum = 0.0;
        let mut pooled: Vec<f64> = Vec::new();
        for o in &outcomes {
            let st = series_stats(&o.test_loss_series).map_err(CliError::from)?;
            chain_means.push(st.mean);
            se2_sum += st.se * st.se;
            pooled.extend_from_slice(&o.test_loss_series);
        }
        let n_ch = outcomes.len() as f64;
        // Two routes to the uncertainty of the ensemble mean: propagate the
        // per-chain autocorrelation-corrected errors, or use the scatter of
        // the independent chain means. Take the larger.
        let se_tau = se2_sum.sqrt() / n_ch;
        let se_scatter = sd_of(&chain_means) / (n_ch - 1.0).max(1.0).sqrt();
        row.mc_mean = mean_of(&chain_means);
        row.mc_sd = sd_of(&pooled);
        row.mc_se = se_tau.max(se_scatter);
        row.mc_chains = outcomes.len();
        combined_sd = if combined_sd.is_nan() { row.mc_se } else { combined_sd.max(row.mc_se) };
    }

    Ok(SweepReport { rows, cnn_infinite, fc_infinite, combined_sd })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_config(extra: &str) -> ExperimentConfig {
        let text = format!(
            "[data]\np = 12\nn0 = 16\nseed = 3\ntest_p = 6\n\n[geometry]\nkind = \"1d\"\nm = 4\ns = 4\n\n[model]\narchitecture = \"cnn\"\nactivation = \"erf\"\nchannels = 4\nbeta = \"200\"\nlambda1 = 8.0\n{extra}"
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn theory_rows_cover_the_grid_and_baselines_use_identity() {
        let cfg = sweep_config("\n[channel-sweep]\nchannels = [2, 4, 16]\n");
        let report = run_channel_sweep(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.cnn_infinite.is_finite() && report.cnn_infinite > 0.0);
        assert!(report.fc_infinite.is_finite());
        for row in &report.rows {
            assert!(row.converged, "width {} did not converge", row.channels);
            assert!(row.cnn_loss.is_finite());
            assert!(row.fc_loss.is_finite());
            assert_eq!(row.fc_n1, row.channels * 4);
            assert!(row.mc_mean.is_nan());
        }
        // Very wide channels approach the infinite-width baseline.
        let widest = report.rows.last().unwrap();
        assert!(
            (widest.cnn_loss - report.cnn_infinite).abs()
                < (report.rows[0].cnn_loss - report.cnn_infinite).abs() + 1e-12
        );
        assert!(report.combined_sd.is_nan());
    }

    #[test]
    fn spot_checks_fill_mc_columns() {
        let cfg = sweep_config(
            "\n[train]\neta = 4e-3\ntemperature = 4e-3\nsteps = 3000\nburn_in = 1000\nthin = 20\nchains = 3\n\n[channel-sweep]\nchannels = [4]\nmc_channels = [4]\n",
        );
        let report = run_channel_sweep(&cfg).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.mc_chains, 3);
        assert!(row.mc_mean.is_finite() && row.mc_mean > 0.0);
        assert!(row.mc_sd > 0.0);
        assert!(row.mc_se > 0.0);
        assert_eq!(report.combined_sd, row.mc_se);
    }

    #[test]
    fn unknown_spot_check_width_is_rejected() {
        let cfg = sweep_config("\n[channel-sweep]\nchannels = [2]\nmc_channels = [3]\n");
        let err = run_channel_sweep(&cfg).unwrap_err();
        assert!(err.to_string().contains("not in channel-sweep.channels"), "{err}");
    }
}
