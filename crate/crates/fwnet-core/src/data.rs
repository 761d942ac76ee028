//! Datasets, task generation, patch geometry, and hyperparameters.
//!
//! Patterns are stored row-wise: `x` is `P x N0` with one input per row.
//! Binary labels live in `{0, 1}` as f64, matching the regression target the
//! Gibbs posterior is conditioned on.

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::Path;

/// Inverse temperature of the Gibbs posterior.
///
/// `Infinite` is the zero-temperature limit in which the posterior
/// concentrates on interpolating solutions; kernel resolvents then drop the
/// `1/beta` ridge and rely on jitter for conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Infinite,
    Finite(f64),
}

impl Beta {
    /// Additive ridge `1/beta` applied to renormalized kernels (0 when infinite).
    pub fn ridge(self) -> f64 {
        match self {
            Beta::Infinite => 0.0,
            Beta::Finite(b) => 1.0 / b,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    /// Parses `"inf"` or a positive number.
    pub fn parse(s: &str) -> Result<Beta> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(Beta::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| CoreError::config(format!("beta must be a number or 'inf', got {t:?}")))?;
        if !v.is_finite() || v <= 0.0 {
            return Err(CoreError::config(format!("beta must be positive, got {v}")));
        }
        Ok(Beta::Finite(v))
    }
}

/// Model-level hyperparameters shared by the analytic and sampling halves.
///
/// `lambda0`/`lambda1` are the Gaussian prior precisions of the first and
/// readout layers, `beta` the inverse temperature of the posterior,
/// `temperature` and `eta` the Langevin temperature and step size, and
/// `alpha` the load `P / N1` at which the saddle point is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub lambda0: f64,
    pub lambda1: f64,
    pub beta: Beta,
    pub temperature: f64,
    pub eta: f64,
    pub alpha: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lambda0: 1.0,
            lambda1: 1.0,
            beta: Beta::Infinite,
            temperature: 2e-3,
            eta: 2e-3,
            alpha: 1.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("temperature", self.temperature),
            ("eta", self.eta),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(CoreError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CoreError::config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A supervised dataset: `P` input patterns of dimension `N0` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `P x N0`, one pattern per row.
    pub x: DMatrix<f64>,
    /// Length `P`, entries in `{0, 1}` for classification tasks.
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Dataset> {
        if x.nrows() != y.len() {
            return Err(CoreError::config(format!(
                "pattern/label count mismatch: {} rows vs {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(CoreError::config("dataset must be non-empty"));
        }
        Ok(Dataset { x, y })
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn n0(&self) -> usize {
        self.x.ncols()
    }
}

/// Draws `p` i.i.d. standard-normal patterns of dimension `n0` and labels them
/// with the sign of a fixed linear teacher: `y = (1 + sign(t . x)) / 2`.
///
/// The teacher has unit entries. Identical `(p, n0, seed)` reproduce the
/// dataset bit for bit. `sign(0)` maps to a label of `0.5`; for continuous
/// inputs this happens with probability zero.
pub fn generate_linear_teacher(p: usize, n0: usize, seed: u64) -> Result<Dataset> {
    let teacher = DVector::from_element(n0, 1.0);
    generate_linear_teacher_with(p, n0, seed, &teacher)
}

/// Same as [`generate_linear_teacher`] but with an explicit teacher vector.
pub fn generate_linear_teacher_with(
    p: usize,
    n0: usize,
    seed: u64,
    teacher: &DVector<f64>,
) -> Result<Dataset> {
    if p == 0 || n0 == 0 {
        return Err(CoreError::config("P and N0 must be positive"));
    }
    if teacher.len() != n0 {
        return Err(CoreError::config(format!(
            "teacher length {} != N0 {}",
            teacher.len(),
            n0
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    // Row-major fill so each pattern is a contiguous draw from the stream.
    let mut x = DMatrix::zeros(p, n0);
    for mu in 0..p {
        for j in 0..n0 {
            x[(mu, j)] = normal.sample(&mut rng);
        }
    }
    let y = DVector::from_fn(p, |mu, _| {
        let s: f64 = x.row(mu).dot(&teacher.transpose());
        0.5 * (1.0 + sign(s))
    });
    Dataset::new(x, y)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The deterministic RNG used by every stochastic component in this crate.
/// Equal seeds reproduce identical streams across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Spatial layout of the input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimensionality {
    /// A ring of `N0` coordinates with periodic boundary conditions.
    One,
    /// A `D x D` grid (`N0 = D^2`), tiled by non-overlapping `M x M` masks.
    Two,
}

/// Patch geometry of the convolutional / locally-connected first layer.
///
/// One-dimensional masks slide with stride `s` over a ring of `n0`
/// coordinates; two-dimensional masks tile a square grid (`s == m`, `m`
/// divides the side). The receptive field of patch `i` is `patch_indices()[i]`
/// and always contains exactly `mask_size()` distinct coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub dimensionality: Dimensionality,
    pub n0: usize,
    pub m: usize,
    pub s: usize,
}

impl ConvGeometry {
    /// One-dimensional geometry with mask `m` and stride `s` on `n0` sites.
    pub fn one_dim(n0: usize, m: usize, s: usize) -> Result<ConvGeometry> {
        let g = ConvGeometry {
            dimensionality: Dimensionality::One,
            n0,
            m,
            s,
        };
        g.validate()?;
        Ok(g)
    }

    /// Two-dimensional geometry: `d x d` grid tiled by `m x m` masks.
    pub fn two_dim(d: usize, m: usize) -> Result<ConvGeometry> {
        let g = ConvGeometry {
            dimensionality: Dimensionality::Two,
            n0: d * d,
            m,
            s: m,
        };
        g.validate()?;
        Ok(g)
    }

    /// The single-patch geometry whose local structures collapse to global
    /// ones: mask and stride both span the whole input.
    pub fn fully_connected(n0: usize) -> Result<ConvGeometry> {
        ConvGeometry::one_dim(n0, n0, n0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.m == 0 || self.s == 0 {
            return Err(CoreError::config("geometry sizes must be positive"));
        }
        match self.dimensionality {
            Dimensionality::One => {
                if self.m > self.n0 {
                    return Err(CoreError::config(format!(
                        "mask {} exceeds input size {}",
                        self.m, self.n0
                    )));
                }
                if self.s > self.n0 {
                    return Err(CoreError::config(format!(
                        "stride {} exceeds input size {}",
                        self.s, self.n0
                    )));
                }
                // Overlapping masks are centered on the stride points, which
                // requires an odd mask; disjoint masks may have any size.
                if self.m > self.s && self.m % 2 == 0 {
                    return Err(CoreError::config(format!(
                        "overlapping 1d mask must be odd, got M = {}",
                        self.m
                    )));
                }
            }
            Dimensionality::Two => {
                let d = int_sqrt(self.n0).ok_or_else(|| {
                    CoreError::config(format!("2d input size {} is not a perfect square", self.n0))
                })?;
                if self.s != self.m {
                    return Err(CoreError::config(
                        "2d masks are non-overlapping: stride must equal mask side",
                    ));
                }
                if self.m > d || d % self.m != 0 {
                    return Err(CoreError::config(format!(
                        "2d mask side {} must divide grid side {d}",
                        self.m
                    )));
                }
            }
        }
        Ok(())
    }

    /// Grid side for two-dimensional geometries.
    pub fn side(&self) -> usize {
        match self.dimensionality {
            Dimensionality::One => self.n0,
            Dimensionality::Two => int_sqrt(self.n0).expect("validated"),
        }
    }

    /// Number of patches (hidden sites per channel).
    pub fn patch_count(&self) -> usize {
        match self.dimensionality {
            Dimensionality::One => self.n0 / self.s,
            Dimensionality::Two => {
                let d = self.side();
                (d / self.m) * (d / self.m)
            }
        }
    }

    /// Number of coordinates each mask covers.
    pub fn mask_size(&self) -> usize {
        match self.dimensionality {
            Dimensionality::One => self.m,
            Dimensionality::Two => self.m * self.m,
        }
    }

    /// Receptive fields: `patch_indices()[i][k]` is the input coordinate seen
    /// by mask entry `k` of patch `i`.
    ///
    /// 1d patches are centered on multiples of the stride with periodic
    /// wraparound: patch `i` covers `(s*i + m) mod n0` for
    /// `m = -floor(M/2) .. M-1-floor(M/2)`. 2d patches are the `M x M` tiles
    /// in row-major order, each tile listed row-major.
    pub fn patch_indices(&self) -> Vec<Vec<usize>> {
        match self.dimensionality {
            Dimensionality::One => {
                let half = self.m / 2;
                (0..self.patch_count())
                    .map(|i| {
                        (0..self.m)
                            .map(|k| {
                                let offset = k as i64 - half as i64;
                                let idx = (self.s * i) as i64 + offset;
                                idx.rem_euclid(self.n0 as i64) as usize
                            })
                            .collect()
                    })
                    .collect()
            }
            Dimensionality::Two => {
                let d = self.side();
                let tiles = d / self.m;
                let mut out = Vec::with_capacity(tiles * tiles);
                for tr in 0..tiles {
                    for tc in 0..tiles {
                        let mut patch = Vec::with_capacity(self.m * self.m);
                        for a in 0..self.m {
                            for b in 0..self.m {
                                patch.push((tr * self.m + a) * d + (tc * self.m + b));
                            }
                        }
                        out.push(patch);
                    }
                }
                out
            }
        }
    }
}

fn int_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Loads a pixel CSV (one image per row) plus a label file (one label per
/// line) and area-averages each image down to `target_side x target_side`.
///
/// Rows of length `s*s` are taken as grayscale; rows of length `3*s*s` as
/// planar RGB, averaged over channels first. Labels may be numeric (`0`/`1`)
/// or exactly two distinct strings, mapped to `{0, 1}` in sorted order.
pub fn load_grayscale_images(
    pixels_path: &Path,
    labels_path: &Path,
    target_side: usize,
) -> Result<Dataset> {
    if target_side == 0 {
        return Err(CoreError::config("target side must be positive"));
    }
    let body = fs::read_to_string(pixels_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            CoreError::format(
                pixels_path.display().to_string(),
                format!("row {}: {e}", lineno + 1),
            )
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CoreError::format(
            pixels_path.display().to_string(),
            "no image rows",
        ));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(CoreError::format(
            pixels_path.display().to_string(),
            "ragged rows",
        ));
    }

    let gray: Vec<Vec<f64>> = if let Some(side) = int_sqrt(width) {
        let _ = side;
        rows
    } else if width % 3 == 0 && int_sqrt(width / 3).is_some() {
        let plane = width / 3;
        rows.iter()
            .map(|r| {
                (0..plane)
                    .map(|i| (r[i] + r[plane + i] + r[2 * plane + i]) / 3.0)
                    .collect()
            })
            .collect()
    } else {
        return Err(CoreError::format(
            pixels_path.display().to_string(),
            format!("row length {width} is neither s^2 nor 3*s^2"),
        ));
    };
    let src_side = int_sqrt(gray[0].len()).expect("checked above");
    if target_side > src_side {
        return Err(CoreError::config(format!(
            "cannot upsample: source side {src_side} < target {target_side}"
        )));
    }

    let labels = load_labels(labels_path, gray.len())?;
    let n0 = target_side * target_side;
    let mut x = DMatrix::zeros(gray.len(), n0);
    for (mu, img) in gray.iter().enumerate() {
        let small = downsample_area(img, src_side, target_side);
        for (j, v) in small.iter().enumerate() {
            x[(mu, j)] = *v;
        }
    }
    Dataset::new(x, DVector::from_vec(labels))
}

fn load_labels(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let body = fs::read_to_string(path)?;
    let raw: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if raw.len() != expected {
        return Err(CoreError::format(
            path.display().to_string(),
            format!("{} labels for {expected} images", raw.len()),
        ));
    }
    if raw.iter().all(|t| t.parse::<f64>().is_ok()) {
        return Ok(raw.iter().map(|t| t.parse::<f64>().unwrap()).collect());
    }
    // String classes: exactly two, assigned 0/1 in sorted order.
    let mut classes: Vec<&str> = raw.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != 2 {
        return Err(CoreError::format(
            path.display().to_string(),
            format!("expected 2 label classes, found {}", classes.len()),
        ));
    }
    Ok(raw
        .iter()
        .map(|t| if *t == classes[0] { 0.0 } else { 1.0 })
        .collect())
}

/// Area-weighted downsampling of a square image; each target pixel is the
/// average of the source region it covers, with fractional rows/columns
/// weighted by overlap.
pub fn downsample_area(src: &[f64], src_side: usize, dst_side: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_side * src_side);
    let ratio = src_side as f64 / dst_side as f64;
    // Per-axis overlap weights of each destination cell over source cells.
    let axis_weights: Vec<Vec<(usize, f64)>> = (0..dst_side)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let mut w = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src_side {
                let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                if overlap > 0.0 {
                    w.push((j, overlap));
                }
                j += 1;
            }
            w
        })
        .collect();
    let mut out = vec![0.0; dst_side * dst_side];
    for r in 0..dst_side {
        for c in 0..dst_side {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for &(sr, wr) in &axis_weights[r] {
                for &(sc, wc) in &axis_weights[c] {
                    acc += wr * wc * src[sr * src_side + sc];
                    wsum += wr * wc;
                }
            }
            out[r * dst_side + c] = acc / wsum;
        }
    }
    out
}
