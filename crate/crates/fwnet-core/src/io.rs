//! On-disk formats: cached kernels, datasets, and saddle-point records.
//!
//! Kernels can take minutes to build at experiment scale, so they are cached
//! as a short self-describing text header followed by the packed lower
//! triangle as little-endian binary. Datasets and saddle solutions are small
//! and stay fully textual; floats are written with Rust's shortest
//! round-tripping representation, so save/load is exact.
//!
//! Every parse failure is a format error naming the offending field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::activation::Activation;
use crate::data::{Beta, ConvGeometry, Dataset, Dimensionality};
use crate::error::{CoreError, Result};
use crate::kernel::{LocalKernel, PatchMatrix};
use crate::saddle::{Architecture, SaddleSolution};

/// First line of a kernel cache file.
pub const KERNEL_MAGIC: &str = "fwnet-kernel v1";
/// Leading token of a dataset file header.
pub const DATASET_MAGIC: &str = "fwnet-dataset v1";
/// First line of a saddle solution record.
pub const SOLUTION_MAGIC: &str = "fwnet-solution v1";

fn ferr(path: &Path, what: impl Into<String>) -> CoreError {
    CoreError::format(path.display().to_string(), what)
}

/// Line-oriented reader over raw bytes: headers are ASCII lines even when a
/// binary payload follows.
struct FieldReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> FieldReader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ferr(self.path, "header ended unexpectedly"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| ferr(self.path, "header is not valid text"))?;
        self.pos += end + 1;
        Ok(line.trim_end_matches('\r'))
    }

    /// Reads one `name value` line and returns the value.
    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.line()?;
        let mut it = line.splitn(2, ' ');
        let key = it.next().unwrap_or("");
        if key != name {
            return Err(ferr(
                self.path,
                format!("expected field '{name}', found '{key}'"),
            ));
        }
        match it.next().map(str::trim) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(ferr(self.path, format!("field '{name}' has no value"))),
        }
    }

    fn numeric<T: FromStr>(&mut self, name: &str) -> Result<T> {
        let raw = self.field(name)?;
        raw.parse().map_err(|_| {
            ferr(
                self.path,
                format!("field '{name}' has malformed value '{raw}'"),
            )
        })
    }

    fn remainder(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn geometry_line(geometry: &ConvGeometry) -> String {
    match geometry.dimensionality {
        Dimensionality::One => format!("1d {} {} {}", geometry.n0, geometry.m, geometry.s),
        Dimensionality::Two => format!("2d {} {}", geometry.side(), geometry.m),
    }
}

fn parse_geometry(path: &Path, value: &str) -> Result<ConvGeometry> {
    let toks: Vec<&str> = value.split_whitespace().collect();
    let bad = || ferr(path, format!("field 'geometry' has malformed value '{value}'"));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match toks.as_slice() {
        ["1d", n0, m, s] => ConvGeometry::one_dim(num(n0)?, num(m)?, num(s)?),
        ["2d", d, m] => ConvGeometry::two_dim(num(d)?, num(m)?),
        _ => Err(bad()),
    }
}

/// A cached kernel together with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct KernelRecord {
    pub kernel: LocalKernel,
    pub activation: Activation,
    pub lambda0: f64,
    pub geometry: ConvGeometry,
}

/// Write a kernel cache file (header described in the module docs).
pub fn save_kernel(
    path: &Path,
    kernel: &LocalKernel,
    activation: Activation,
    lambda0: f64,
    geometry: &ConvGeometry,
) -> Result<()> {
    let packed = kernel.packed();
    let mut header = String::new();
    let _ = writeln!(header, "{KERNEL_MAGIC}");
    let _ = writeln!(header, "patterns {}", kernel.n_patterns());
    let _ = writeln!(header, "patches {}", kernel.n_patches());
    let _ = writeln!(header, "activation {}", activation.name());
    let _ = writeln!(header, "lambda0 {lambda0}");
    let _ = writeln!(header, "geometry {}", geometry_line(geometry));
    let _ = writeln!(header, "payload {}", packed.len());
    let mut out = Vec::with_capacity(header.len() + packed.len() * 8);
    out.extend_from_slice(header.as_bytes());
    for v in packed {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a kernel cache file back, validating every header field.
pub fn load_kernel(path: &Path) -> Result<KernelRecord> {
    let buf = fs::read(path)?;
    let mut r = FieldReader::new(&buf, path);
    let magic = r.line()?;
    if magic != KERNEL_MAGIC {
        return Err(ferr(path, format!("unrecognized header '{magic}'")));
    }
    let patterns: usize = r.numeric("patterns")?;
    let patches: usize = r.numeric("patches")?;
    if patterns == 0 || patches == 0 {
        return Err(ferr(path, "fields 'patterns' and 'patches' must be positive"));
    }
    let act_raw = r.field("activation")?;
    let activation = Activation::parse(act_raw)
        .ok_or_else(|| ferr(path, format!("field 'activation' has unknown value '{act_raw}'")))?;
    let lambda0: f64 = r.numeric("lambda0")?;
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(ferr(path, format!("field 'lambda0' must be positive, got {lambda0}")));
    }
    let geometry = parse_geometry(path, r.field("geometry")?)?;
    if geometry.patch_count() != patches {
        return Err(ferr(
            path,
            format!(
                "field 'patches' ({patches}) contradicts the geometry ({} patches)",
                geometry.patch_count()
            ),
        ));
    }
    let payload: usize = r.numeric("payload")?;
    let dim = patterns * patches;
    let want = dim * (dim + 1) / 2;
    if payload != want {
        return Err(ferr(
            path,
            format!("field 'payload' is {payload}, but the dimensions require {want}"),
        ));
    }
    let bytes = r.remainder();
    if bytes.len() != payload * 8 {
        return Err(ferr(
            path,
            format!("payload holds {} bytes, expected {}", bytes.len(), payload * 8),
        ));
    }
    let mut kernel = PatchMatrix::zeros(patterns, patches);
    for (slot, chunk) in kernel.packed_mut().iter_mut().zip(bytes.chunks_exact(8)) {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunks are 8 bytes"));
        if !v.is_finite() {
            return Err(ferr(path, "payload contains a non-finite entry"));
        }
        *slot = v;
    }
    Ok(KernelRecord { kernel, activation, lambda0, geometry })
}

/// Write a dataset as one header line plus one CSV row per pattern, the
/// label last.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC} {} {}", data.p(), data.n0());
    for mu in 0..data.p() {
        for k in 0..data.n0() {
            let _ = write!(out, "{},", data.x[(mu, k)]);
        }
        let _ = writeln!(out, "{}", data.y[mu]);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| ferr(path, "file is empty"))?;
    let toks: Vec<&str> = head.split_whitespace().collect();
    if toks.len() != 4 || format!("{} {}", toks[0], toks[1]) != DATASET_MAGIC {
        return Err(ferr(path, format!("unrecognized header '{head}'")));
    }
    let parse_dim = |name: &str, raw: &str| -> Result<usize> {
        raw.parse()
            .map_err(|_| ferr(path, format!("field '{name}' has malformed value '{raw}'")))
    };
    let p = parse_dim("patterns", toks[2])?;
    let n0 = parse_dim("n0", toks[3])?;
    if p == 0 || n0 == 0 {
        return Err(ferr(path, "dataset dimensions must be positive"));
    }
    let mut x = DMatrix::zeros(p, n0);
    let mut y = DVector::zeros(p);
    for mu in 0..p {
        let line = lines
            .next()
            .ok_or_else(|| ferr(path, format!("row {mu} is missing ({p} expected)")))?;
        let mut fields = line.split(',');
        for k in 0..n0 {
            let raw = fields
                .next()
                .ok_or_else(|| ferr(path, format!("row {mu} has fewer than {} fields", n0 + 1)))?;
            x[(mu, k)] = raw
                .trim()
                .parse()
                .map_err(|_| ferr(path, format!("row {mu} field {k} is malformed: '{raw}'")))?;
        }
        let raw = fields
            .next()
            .ok_or_else(|| ferr(path, format!("row {mu} is missing its label")))?;
        y[mu] = raw
            .trim()
            .parse()
            .map_err(|_| ferr(path, format!("row {mu} label is malformed: '{raw}'")))?;
        if fields.next().is_some() {
            return Err(ferr(path, format!("row {mu} has more than {} fields", n0 + 1)));
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(ferr(path, format!("trailing data after {p} rows")));
    }
    Ok(Dataset { x, y })
}

/// A saddle solution plus the scalars needed to reuse it downstream.
#[derive(Debug, Clone)]
pub struct SolutionRecord {
    pub solution: SaddleSolution,
    pub alpha: f64,
    pub lambda1: f64,
    pub beta: Beta,
}

fn matrix_line(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{}", m[(r, c)]);
        }
    }
    s
}

fn parse_matrix(path: &Path, name: &str, value: &str, n: usize) -> Result<DMatrix<f64>> {
    let vals: Vec<f64> = value
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| ferr(path, format!("field '{name}' has malformed entry '{t}'")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != n * n {
        return Err(ferr(
            path,
            format!("field '{name}' has {} entries, expected {}", vals.len(), n * n),
        ));
    }
    Ok(DMatrix::from_row_slice(n, n, &vals))
}

/// Write a saddle solution record.
pub fn save_solution(path: &Path, rec: &SolutionRecord) -> Result<()> {
    let s = &rec.solution;
    let mut out = String::new();
    let _ = writeln!(out, "{SOLUTION_MAGIC}");
    let _ = writeln!(out, "architecture {}", s.architecture.name());
    let _ = writeln!(out, "alpha {}", rec.alpha);
    let _ = writeln!(out, "lambda1 {}", rec.lambda1);
    match rec.beta {
        Beta::Infinite => {
            let _ = writeln!(out, "beta inf");
        }
        Beta::Finite(b) => {
            let _ = writeln!(out, "beta {b}");
        }
    }
    let _ = writeln!(out, "patches {}", s.qbar.nrows());
    let _ = writeln!(out, "residual {}", s.residual);
    let _ = writeln!(out, "iterations {}", s.iterations);
    let _ = writeln!(out, "converged {}", s.converged);
    let _ = writeln!(out, "qbar-min-eigenvalue {}", s.qbar_min_eigenvalue);
    let _ = writeln!(out, "qbar {}", matrix_line(&s.qbar));
    let _ = writeln!(out, "q {}", matrix_line(&s.q));
    fs::write(path, out)?;
    Ok(())
}

/// Read a saddle solution record written by [`save_solution`].
pub fn load_solution(path: &Path) -> Result<SolutionRecord> {
    let buf = fs::read(path)?;
    let mut r = FieldReader::new(&buf, path);
    let magic = r.line()?;
    if magic != SOLUTION_MAGIC {
        return Err(ferr(path, format!("unrecognized header '{magic}'")));
    }
    let architecture = Architecture::parse(r.field("architecture")?)
        .map_err(|e| ferr(path, format!("field 'architecture': {e}")))?;
    let alpha: f64 = r.numeric("alpha")?;
    let lambda1: f64 = r.numeric("lambda1")?;
    let beta = Beta::parse(r.field("beta")?)
        .map_err(|e| ferr(path, format!("field 'beta': {e}")))?;
    let patches: usize = r.numeric("patches")?;
    if patches == 0 {
        return Err(ferr(path, "field 'patches' must be positive"));
    }
    let residual: f64 = r.numeric("residual")?;
    let iterations: usize = r.numeric("iterations")?;
    let converged: bool = r.numeric("converged")?;
    let qbar_min_eigenvalue: f64 = r.numeric("qbar-min-eigenvalue")?;
    let qbar = parse_matrix(path, "qbar", r.field("qbar")?, patches)?;
    let q = parse_matrix(path, "q", r.field("q")?, patches)?;
    Ok(SolutionRecord {
        solution: SaddleSolution {
            architecture,
            qbar,
            q,
            residual,
            iterations,
            converged,
            qbar_min_eigenvalue,
        },
        alpha,
        lambda1,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_linear_teacher;
    use crate::kernel::{kernel_from_local, local_covariance};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("temp dir")
    }

    fn toy_kernel() -> (LocalKernel, ConvGeometry) {
        let ds = generate_linear_teacher(4, 12, 5).unwrap();
        let geom = ConvGeometry::one_dim(12, 3, 3).unwrap();
        let cov = local_covariance(&ds.x, &geom, 1.5).unwrap();
        (kernel_from_local(&cov, Activation::Tanh, 40), geom)
    }

    #[test]
    fn kernel_cache_round_trips_exactly() {
        let dir = tmp();
        let path = dir.path().join("kernel.bin");
        let (k, geom) = toy_kernel();
        save_kernel(&path, &k, Activation::Tanh, 1.5, &geom).unwrap();
        let rec = load_kernel(&path).unwrap();
        assert_eq!(rec.kernel, k);
        assert_eq!(rec.activation, Activation::Tanh);
        assert_eq!(rec.lambda0, 1.5);
        assert_eq!(rec.geometry.n0, geom.n0);
        assert_eq!(rec.geometry.m, geom.m);
        assert_eq!(rec.geometry.s, geom.s);
    }

    #[test]
    fn two_dim_geometry_round_trips() {
        let dir = tmp();
        let path = dir.path().join("kernel2d.bin");
        let ds = generate_linear_teacher(3, 16, 9).unwrap();
        let geom = ConvGeometry::two_dim(4, 2).unwrap();
        let cov = local_covariance(&ds.x, &geom, 1.0).unwrap();
        let k = kernel_from_local(&cov, Activation::Erf, 40);
        save_kernel(&path, &k, Activation::Erf, 1.0, &geom).unwrap();
        let rec = load_kernel(&path).unwrap();
        assert_eq!(rec.kernel, k);
        assert_eq!(rec.geometry.dimensionality, Dimensionality::Two);
        assert_eq!(rec.geometry.side(), 4);
    }

    #[test]
    fn corrupted_kernel_header_names_the_field() {
        let dir = tmp();
        let path = dir.path().join("kernel.bin");
        let (k, geom) = toy_kernel();
        save_kernel(&path, &k, Activation::Tanh, 1.5, &geom).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Misspell the 'patterns' key.
        let pos = bytes.windows(8).position(|w| w == b"patterns").unwrap();
        bytes[pos] = b'q';
        fs::write(&path, &bytes).unwrap();
        let err = load_kernel(&path).unwrap_err().to_string();
        assert!(err.contains("patterns"), "error was: {err}");
    }

    #[test]
    fn truncated_kernel_payload_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("kernel.bin");
        let (k, geom) = toy_kernel();
        save_kernel(&path, &k, Activation::Tanh, 1.5, &geom).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_kernel(&path).unwrap_err().to_string();
        assert!(err.contains("payload"), "error was: {err}");
    }

    #[test]
    fn inconsistent_patch_count_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("kernel.bin");
        let (k, geom) = toy_kernel();
        save_kernel(&path, &k, Activation::Tanh, 1.5, &geom).unwrap();
        let text = fs::read(&path).unwrap();
        // Claim 3 patches while the geometry provides 4.
        let pos = text.windows(9).position(|w| w == b"patches 4").unwrap();
        let mut bytes = text.clone();
        bytes[pos + 8] = b'3';
        fs::write(&path, &bytes).unwrap();
        let err = load_kernel(&path).unwrap_err().to_string();
        assert!(err.contains("patches") || err.contains("payload"), "error was: {err}");
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tmp();
        let path = dir.path().join("data.csv");
        let ds = generate_linear_teacher(5, 7, 3).unwrap();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn malformed_dataset_rows_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("data.csv");
        fs::write(&path, format!("{DATASET_MAGIC} 2 3\n1,2,3,0\n1,2\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("row 1"), "error was: {err}");
        fs::write(&path, format!("{DATASET_MAGIC} 1 2\n1,2,0\nleftover\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "error was: {err}");
    }

    #[test]
    fn solution_record_round_trips_exactly() {
        let dir = tmp();
        for beta in [Beta::Infinite, Beta::Finite(500.0)] {
            let path = dir.path().join("solution.txt");
            let qbar = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.7]);
            let q = DMatrix::from_row_slice(2, 2, &[0.25, -0.05, -0.05, 0.4286]);
            let rec = SolutionRecord {
                solution: SaddleSolution {
                    architecture: Architecture::Convolutional,
                    qbar: qbar.clone(),
                    q: q.clone(),
                    residual: 3.2e-12,
                    iterations: 41,
                    converged: true,
                    qbar_min_eigenvalue: 0.6123,
                },
                alpha: 1.25,
                lambda1: 12.5,
                beta,
            };
            save_solution(&path, &rec).unwrap();
            let back = load_solution(&path).unwrap();
            assert_eq!(back.solution.architecture, Architecture::Convolutional);
            assert_eq!(back.solution.qbar, qbar);
            assert_eq!(back.solution.q, q);
            assert_eq!(back.solution.residual, 3.2e-12);
            assert_eq!(back.solution.iterations, 41);
            assert!(back.solution.converged);
            assert_eq!(back.solution.qbar_min_eigenvalue, 0.6123);
            assert_eq!(back.alpha, 1.25);
            assert_eq!(back.lambda1, 12.5);
            assert_eq!(back.beta, beta);
        }
    }

    #[test]
    fn malformed_solution_matrix_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("solution.txt");
        let text = format!(
            "{SOLUTION_MAGIC}\narchitecture fc\nalpha 1\nlambda1 1\nbeta inf\npatches 1\n\
             residual 0\niterations 3\nconverged true\nqbar-min-eigenvalue 1\nqbar 0.5 0.5\nq 0.1\n"
        );
        fs::write(&path, text).unwrap();
        let err = load_solution(&path).unwrap_err().to_string();
        assert!(err.contains("qbar"), "error was: {err}");
    }
}
