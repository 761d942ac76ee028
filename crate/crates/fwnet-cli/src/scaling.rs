//! Width-scaling experiments: sweep sizes `(P, width)` at one fixed load,
//! compare measured similarity shifts against the theory per label block,
//! and fit the scaling exponents of the block statistics.
//!
//! Error bands combine three effects with pinned formulas:
//! * `3 se`, the Monte Carlo uncertainty (jackknife over chains);
//! * `eps = rms(theory block)^2 / k_scale`, the next order in `1/width`
//!   estimated from the square of the leading shift relative to the kernel
//!   scale `k_scale` (mean prior diagonal);
//! * `0.5 eta T lambda0 |prior block mean|`, the first-order Langevin
//!   discretization bias of the sampled similarity.
//! Mean bands add all three; variance bands use `3 se + 2 sqrt(var_th) eps
//! + eps^2`, the effect of an `eps`-sized perturbation on a variance.

use nalgebra::DMatrix;

use fwnet_core::oracle::similarity::{block_mean, block_statistics, block_variance, BLOCK_NAMES};
use fwnet_core::stats::{log_log_slope, two_point_slope};
use fwnet_core::Dataset;

use crate::config::ExperimentConfig;
use crate::ensemble::{run_ensemble, EnsembleSpec};
use crate::pipeline::Theory;
use crate::{CliError, Result};

/// Comparison of one label block at one size.
#[derive(Debug, Clone, Copy)]
pub struct BlockReport {
    pub name: &'static str,
    pub theory_mean: f64,
    pub theory_var: f64,
    pub measured_mean: f64,
    pub mean_se: f64,
    pub mean_band: f64,
    /// `None` when nothing was compared (theory-only mode, or no theory
    /// shift for the architecture).
    pub mean_ok: Option<bool>,
    pub measured_var: f64,
    pub var_se: f64,
    pub var_naive: f64,
    pub noise_floor: f64,
    pub var_band: f64,
    pub var_ok: Option<bool>,
}

impl BlockReport {
    fn empty(name: &'static str) -> Self {
        Self {
            name,
            theory_mean: f64::NAN,
            theory_var: f64::NAN,
            measured_mean: f64::NAN,
            mean_se: f64::NAN,
            mean_band: f64::NAN,
            mean_ok: None,
            measured_var: f64::NAN,
            var_se: f64::NAN,
            var_naive: f64::NAN,
            noise_floor: f64::NAN,
            var_band: f64::NAN,
            var_ok: None,
        }
    }
}

/// Per-chain thermalization summary.
#[derive(Debug, Clone, Copy)]
pub struct ChainBrief {
    pub seed: u64,
    pub snapshots: usize,
    pub final_data_loss: f64,
    pub plateau_drift: f64,
}

/// One size of the sweep.
#[derive(Debug, Clone)]
pub struct SizeReport {
    pub p: usize,
    pub channels: usize,
    pub n1: usize,
    pub alpha: f64,
    pub converged: bool,
    pub residual: f64,
    pub chains: usize,
    pub snapshots_min: usize,
    pub drift_max: f64,
    pub blocks: [BlockReport; 3],
    pub chain_details: Vec<ChainBrief>,
}

/// One fitted exponent.
#[derive(Debug, Clone)]
pub struct SlopeRow {
    /// "var01" or "mean11".
    pub quantity: &'static str,
    /// "measured" or "theory".
    pub source: &'static str,
    /// "least-squares" for three or more sizes, "two-point" for two.
    pub method: &'static str,
    pub slope: f64,
    pub se: f64,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub sizes: Vec<SizeReport>,
    pub slopes: Vec<SlopeRow>,
}

fn dataset_at(cfg: &ExperimentConfig, p: usize) -> Result<Dataset> {
    let mut c = cfg.clone();
    c.data.p = p;
    c.data.test_p = 0;
    Ok(c.datasets()?.0)
}

struct TheoryBlocks {
    mean: [f64; 3],
    var: [f64; 3],
}

fn theory_blocks(dk: Option<&DMatrix<f64>>, data: &Dataset) -> Result<Option<TheoryBlocks>> {
    let Some(dk) = dk else { return Ok(None) };
    let stats = block_statistics(dk, &data.y)?;
    let mut out = TheoryBlocks { mean: [f64::NAN; 3], var: [f64::NAN; 3] };
    for b in 0..3 {
        if let Some(s) = stats[b] {
            out.mean[b] = s.mean;
            out.var[b] = s.var;
        }
    }
    Ok(Some(out))
}

/// Run the sweep described by `cfg.scaling` (plus the shared sections).
pub fn run_scaling(cfg: &ExperimentConfig) -> Result<ScalingReport> {
    let sizes = &cfg.scaling.sizes;
    if sizes.is_empty() {
        return Err(CliError::config("scaling.sizes must list at least one (p, width) pair"));
    }
    let (p0, c0) = (sizes[0][0], sizes[0][1]);
    for s in sizes {
        if s[0] == 0 || s[1] == 0 {
            return Err(CliError::config("scaling sizes must be positive"));
        }
        if s[0] * c0 != p0 * s[1] {
            return Err(CliError::config(format!(
                "scaling sizes must share one load: ({}, {}) breaks p/width = {}/{}",
                s[0], s[1], p0, c0
            )));
        }
    }
    if !cfg.scaling.theory_only && cfg.train.chains > 255 {
        return Err(CliError::config("scaling runs support at most 255 chains per size"));
    }
    let theory = Theory::from_config(cfg)?;
    let beta = cfg.beta()?;
    let opts = cfg.saddle_options();
    let alpha = p0 as f64 / c0 as f64;

    let mut reports = Vec::with_capacity(sizes.len());
    if cfg.scaling.theory_only {
        // The scaling law itself: solve once at the anchor size and carry
        // the exact `1/width` dependence across the grid, so the fitted
        // exponents are free of dataset-to-dataset fluctuations.
        let data = dataset_at(cfg, p0)?;
        let lk = theory.kernel(&data.x)?;
        let sol = theory.solve(&lk, &data.y, alpha, beta, &opts)?;
        let dk0 = theory.similarity_shift(&lk, &sol, &data.y, c0, beta)?;
        for s in sizes {
            let (p, c) = (s[0], s[1]);
            let scaled = dk0.as_ref().map(|d| d * (c0 as f64 / c as f64));
            let tb = theory_blocks(scaled.as_ref(), &data)?;
            let mut blocks = [
                BlockReport::empty(BLOCK_NAMES[0]),
                BlockReport::empty(BLOCK_NAMES[1]),
                BlockReport::empty(BLOCK_NAMES[2]),
            ];
            if let Some(tb) = &tb {
                for b in 0..3 {
                    blocks[b].theory_mean = tb.mean[b];
                    blocks[b].theory_var = tb.var[b];
                }
            }
            reports.push(SizeReport {
                p,
                channels: c,
                n1: theory.n1(c),
                alpha,
                converged: sol.converged,
                residual: sol.residual,
                chains: 0,
                snapshots_min: 0,
                drift_max: f64::NAN,
                blocks,
                chain_details: Vec::new(),
            });
        }
    } else {
        for (idx, s) in sizes.iter().enumerate() {
            let (p, c) = (s[0], s[1]);
            let data = dataset_at(cfg, p)?;
            let lk = theory.kernel(&data.x)?;
            let sol = theory.solve(&lk, &data.y, alpha, beta, &opts)?;
            let dk = theory.similarity_shift(&lk, &sol, &data.y, c, beta)?;
            let prior_ref = theory.prior_reference(&lk);
            let tb = theory_blocks(dk.as_ref(), &data)?;
            let prior_stats = block_statistics(&prior_ref, &data.y)?;
            let k_scale = prior_ref.diagonal().mean();

            let spec = EnsembleSpec {
                architecture: theory.architecture,
                geometry: theory.geometry,
                channels: c,
                activation: theory.activation,
                lambda0: theory.lambda0,
                lambda1: theory.lambda1,
            };
            let seed_base = cfg.data.seed.wrapping_add(0x100 * (idx as u64 + 1));
            let tc = cfg.train_config(seed_base)?;
            let outcomes = run_ensemble(&spec, &data, &tc, cfg.train.chains, None)?;
            let deltas: Vec<DMatrix<f64>> =
                outcomes.iter().map(|o| &o.mean_similarity - &prior_ref).collect();

            let mut blocks = [
                BlockReport::empty(BLOCK_NAMES[0]),
                BlockReport::empty(BLOCK_NAMES[1]),
                BlockReport::empty(BLOCK_NAMES[2]),
            ];
            for b in 0..3 {
                let bm = block_mean(&deltas, &data.y, b)?;
                let bv = block_variance(&deltas, &data.y, b)?;
                let rep = &mut blocks[b];
                rep.measured_mean = bm.mean;
                rep.mean_se = bm.se;
                rep.measured_var = bv.value;
                rep.var_se = bv.se;
                rep.var_naive = bv.naive;
                rep.noise_floor = bv.noise_floor;
                if let Some(tb) = &tb {
                    rep.theory_mean = tb.mean[b];
                    rep.theory_var = tb.var[b];
                    let rms2 = tb.mean[b] * tb.mean[b] + tb.var[b];
                    let eps = rms2 / k_scale;
                    let prior_mean =
                        prior_stats[b].map(|s| s.mean.abs()).unwrap_or(f64::NAN);
                    let disc = 0.5
                        * cfg.train.eta
                        * cfg.train.temperature
                        * cfg.model.lambda0
                        * prior_mean;
                    rep.mean_band = 3.0 * bm.se + eps + disc;
                    rep.mean_ok = Some((bm.mean - tb.mean[b]).abs() <= rep.mean_band);
                    rep.var_band = 3.0 * bv.se + 2.0 * tb.var[b].sqrt() * eps + eps * eps;
                    rep.var_ok = Some((bv.value - tb.var[b]).abs() <= rep.var_band);
                }
            }
            reports.push(SizeReport {
                p,
                channels: c,
                n1: theory.n1(c),
                alpha,
                converged: sol.converged,
                residual: sol.residual,
                chains: outcomes.len(),
                snapshots_min: outcomes.iter().map(|o| o.snapshots).min().unwrap_or(0),
                drift_max: outcomes
                    .iter()
                    .map(|o| o.plateau_drift)
                    .fold(f64::NEG_INFINITY, f64::max),
                chain_details: outcomes
                    .iter()
                    .map(|o| ChainBrief {
                        seed: o.seed,
                        snapshots: o.snapshots,
                        final_data_loss: o.final_data_loss,
                        plateau_drift: o.plateau_drift,
                    })
                    .collect(),
                blocks,
            });
        }
    }

    let slopes = fit_slopes(&reports, cfg.scaling.theory_only);
    Ok(ScalingReport { sizes: reports, slopes })
}

fn fit_one(
    quantity: &'static str,
    source: &'static str,
    pts: &[(f64, f64)],
) -> Option<SlopeRow> {
    let pts: Vec<(f64, f64)> =
        pts.iter().copied().filter(|&(x, y)| x > 0.0 && y > 0.0 && y.is_finite()).collect();
    match pts.len() {
        0 | 1 => None,
        2 => two_point_slope(pts[0].0, pts[0].1, pts[1].0, pts[1].1).ok().map(|slope| {
            SlopeRow { quantity, source, method: "two-point", slope, se: f64::NAN, points: 2 }
        }),
        _ => log_log_slope(&pts).ok().map(|fit| SlopeRow {
            quantity,
            source,
            method: "least-squares",
            slope: fit.slope,
            se: fit.slope_se,
            points: pts.len(),
        }),
    }
}

/// Exponents of the block-01 element variance and the absolute block-11
/// mean against the width dial. The dial is proportional to the full hidden
/// width, and a log-log slope is invariant under a constant rescaling of
/// the abscissa, so one fit serves every architecture.
fn fit_slopes(sizes: &[SizeReport], theory_only: bool) -> Vec<SlopeRow> {
    let xs: Vec<f64> = sizes.iter().map(|s| s.channels as f64).collect();
    let mut rows = Vec::new();
    let grab = |f: &dyn Fn(&SizeReport) -> f64| -> Vec<(f64, f64)> {
        xs.iter().copied().zip(sizes.iter().map(|s| f(s))).collect()
    };
    if !theory_only {
        rows.extend(fit_one("var01", "measured", &grab(&|s| s.blocks[1].measured_var)));
        rows.extend(fit_one(
            "mean11",
            "measured",
            &grab(&|s| s.blocks[2].measured_mean.abs()),
        ));
    }
    rows.extend(fit_one("var01", "theory", &grab(&|s| s.blocks[1].theory_var)));
    rows.extend(fit_one("mean11", "theory", &grab(&|s| s.blocks[2].theory_mean.abs())));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn base_config(extra: &str) -> ExperimentConfig {
        let text = format!(
            "[data]\np = 16\nn0 = 12\nseed = 5\n\n[model]\nactivation = \"erf\"\nchannels = 8\nbeta = \"500\"\n{extra}"
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn theory_only_fully_connected_slopes_are_exact() {
        let cfg = base_config(
            "\n[scaling]\nsizes = [[16, 8], [32, 16], [64, 32]]\ntheory_only = true\n",
        );
        let report = run_scaling(&cfg).unwrap();
        assert_eq!(report.sizes.len(), 3);
        let var = report
            .slopes
            .iter()
            .find(|r| r.quantity == "var01" && r.source == "theory")
            .unwrap();
        let mean = report
            .slopes
            .iter()
            .find(|r| r.quantity == "mean11" && r.source == "theory")
            .unwrap();
        assert_eq!(var.method, "least-squares");
        assert!((var.slope + 2.0).abs() < 1e-10, "var slope {}", var.slope);
        assert!((mean.slope + 1.0).abs() < 1e-10, "mean slope {}", mean.slope);
    }

    #[test]
    fn mismatched_loads_are_rejected() {
        let cfg = base_config("\n[scaling]\nsizes = [[16, 8], [32, 12]]\ntheory_only = true\n");
        let err = run_scaling(&cfg).unwrap_err();
        assert!(err.to_string().contains("share one load"), "{err}");
    }

    #[test]
    fn two_sizes_give_two_point_exponents() {
        let cfg =
            base_config("\n[scaling]\nsizes = [[16, 8], [32, 16]]\ntheory_only = true\n");
        let report = run_scaling(&cfg).unwrap();
        for row in &report.slopes {
            assert_eq!(row.method, "two-point");
            assert!(row.se.is_nan());
        }
        let var = report.slopes.iter().find(|r| r.quantity == "var01").unwrap();
        assert!((var.slope + 2.0).abs() < 1e-10);
    }

    #[test]
    fn monte_carlo_smoke_run_populates_measurements() {
        let cfg = base_config(
            "\n[train]\neta = 2e-3\ntemperature = 2e-3\nsteps = 4000\nburn_in = 1000\nthin = 20\nchains = 3\n\n[scaling]\nsizes = [[8, 4]]\n",
        );
        let mut cfg = cfg;
        cfg.data.p = 8;
        let report = run_scaling(&cfg).unwrap();
        assert_eq!(report.sizes.len(), 1);
        let size = &report.sizes[0];
        assert_eq!(size.chains, 3);
        assert!(size.snapshots_min > 0);
        for b in &size.blocks {
            assert!(b.measured_mean.is_finite());
            assert!(b.mean_band.is_finite());
            assert!(b.mean_ok.is_some());
            assert!(b.noise_floor >= 0.0);
        }
        assert!(report.slopes.is_empty());
    }
}
