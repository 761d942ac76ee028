//! Time-series and regression statistics for Monte-Carlo runs.
//!
//! Chains produced by the samplers are correlated, so naive standard errors
//! understate the uncertainty. The integrated autocorrelation time measured
//! by the self-consistent window rule rescales them; scaling exponents are
//! read off by unweighted least squares in log-log coordinates.

use crate::error::{CoreError, Result};

/// Window multiplier of the self-consistent truncation rule: the correlation
/// sum is cut at the first lag exceeding this multiple of the running
/// estimate.
pub const WINDOW_FACTOR: f64 = 5.0;

/// Integrated autocorrelation time `1 + 2 sum_t rho_t` with the sum cut by
/// the self-consistent window rule. Values are floored at one so that the
/// resulting error bars are conservative.
pub fn integrated_autocorrelation_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 1.0;
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let c0 = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    if !(c0 > 0.0) {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut tau = 1.0;
    for t in 1..n {
        let mut c = 0.0;
        for i in 0..n - t {
            c += (series[i] - mean) * (series[i + t] - mean);
        }
        sum += c / nf / c0;
        tau = 1.0 + 2.0 * sum;
        if t as f64 >= WINDOW_FACTOR * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Mean of a correlated series with an autocorrelation-corrected standard
/// error.
#[derive(Debug, Clone, Copy)]
pub struct SeriesStats {
    pub mean: f64,
    /// `sqrt(var * tau / n)`.
    pub se: f64,
    pub tau: f64,
    /// Effective sample count `n / tau`.
    pub n_eff: f64,
}

/// Mean and corrected standard error of a correlated series.
pub fn series_stats(series: &[f64]) -> Result<SeriesStats> {
    let n = series.len();
    if n == 0 {
        return Err(CoreError::numerical("statistics of an empty series"));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let tau = integrated_autocorrelation_time(series);
    Ok(SeriesStats { mean, se: (var * tau / nf).sqrt(), tau, n_eff: nf / tau })
}

/// Straight-line fit in log-log coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    /// Intercept in log space: `ln y = intercept + slope ln x`.
    pub intercept: f64,
    /// Standard error of the slope from the fit residuals; zero when the
    /// points are exactly collinear or there are no spare degrees of freedom.
    pub slope_se: f64,
}

/// Unweighted least squares on `(ln x, ln y)`. Refuses fewer than three
/// points: a two-point "fit" has no residual and silently hides noise.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(CoreError::config(format!(
            "a scaling fit needs at least three points, got {}",
            points.len()
        )));
    }
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) {
            return Err(CoreError::numerical(format!(
                "log-log fit needs positive coordinates, got ({x}, {y})"
            )));
        }
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx <= 0.0 {
        return Err(CoreError::numerical("all abscissas coincide; slope is undefined"));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let dof = logs.len() as f64 - 2.0;
    let slope_se = if dof > 0.0 { (ssr / dof / sxx).sqrt() } else { 0.0 };
    Ok(SlopeFit { slope, intercept, slope_se })
}

/// Exponent connecting two measurements assumed to follow a pure power law:
/// `ln(y1/y0) / ln(x1/x0)`.
pub fn two_point_slope(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<f64> {
    if !(x0 > 0.0 && x1 > 0.0 && y0 > 0.0 && y1 > 0.0) {
        return Err(CoreError::numerical(
            "a power-law exponent needs positive measurements",
        ));
    }
    if x0 == x1 {
        return Err(CoreError::numerical("coincident abscissas give no exponent"));
    }
    Ok((y1 / y0).ln() / (x1 / x0).ln())
}

/// Relative drift between the first and second half of a series,
/// `|m2 - m1| / max(|m1|, |m2|)`; zero for a flat trace. Used to decide
/// whether a chain has thermalized by the end of its burn-in window.
pub fn relative_drift(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    let half = n / 2;
    let m1 = series[..half].iter().sum::<f64>() / half as f64;
    let m2 = series[half..].iter().sum::<f64>() / (n - half) as f64;
    let scale = m1.abs().max(m2.abs());
    if scale == 0.0 {
        0.0
    } else {
        (m2 - m1).abs() / scale
    }
}
