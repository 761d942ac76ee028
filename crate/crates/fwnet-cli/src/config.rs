//! Experiment configuration: one TOML file per experiment with a section per
//! pipeline stage. Unknown keys are rejected so a typo never silently changes
//! an experiment, and the resolved configuration hashes to a stable value
//! that every result row carries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fwnet_core::data::{generate_linear_teacher, load_grayscale_images};
use fwnet_core::oracle::{Optimizer, TrainConfig};
use fwnet_core::{Activation, Architecture, Beta, ConvGeometry, Dataset};

use crate::{CliError, Result};

/// Offset added to the data seed when drawing held-out teacher inputs, so
/// the test set never overlaps the training draw.
const TEST_SEED_OFFSET: u64 = 0x7e57;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "teacher" for the synthetic linearly separable task, "images" for a
    /// grayscale image file pair.
    pub source: String,
    /// Training patterns.
    pub p: usize,
    /// Input dimension.
    pub n0: usize,
    /// Seed for the data draw.
    pub seed: u64,
    /// Held-out points (teacher source) or rows reserved from the end of the
    /// image set.
    pub test_p: usize,
    /// Multiply inputs by sqrt(lambda0). The kernel is invariant under this
    /// joint rescaling, while the weight prior relaxes faster in the
    /// sampler, so Monte Carlo runs use it with a large lambda0.
    pub scale_inputs: bool,
    /// Image pixel file ("images" source).
    pub pixels: Option<PathBuf>,
    /// Image label file ("images" source).
    pub labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "teacher".into(),
            p: 0,
            n0: 0,
            seed: 1,
            test_p: 0,
            scale_inputs: false,
            pixels: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    /// "fc" (single whole-input patch), "1d" (ring), or "2d" (square grid).
    pub kind: String,
    /// Mask size: coordinates per patch ("1d") or mask side ("2d").
    pub m: usize,
    /// Stride ("1d" only; "2d" tiles with s = m).
    pub s: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self { kind: "fc".into(), m: 0, s: 0 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "fc", "lcn", or "cnn".
    pub architecture: String,
    /// "linear", "erf", or "tanh".
    pub activation: String,
    /// Hidden-weight prior precision.
    pub lambda0: f64,
    /// Readout prior precision.
    pub lambda1: f64,
    /// Inverse temperature of the theory: "inf" or a positive number.
    pub beta: String,
    /// Width dial: hidden units for "fc", channels for "lcn"/"cnn".
    pub channels: usize,
    /// Gauss-Hermite order for non-closed-form kernels.
    pub order: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: "fc".into(),
            activation: "erf".into(),
            lambda0: 1.0,
            lambda1: 1.0,
            beta: "inf".into(),
            channels: 1,
            order: 320,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    /// Loads to solve at; empty means the single load p / channels.
    pub alphas: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self { alphas: Vec::new(), tol: 1e-8, max_iter: 2000, damping: 0.5 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "langevin", "gd", or "adam"; the fast samplers accept only langevin.
    pub optimizer: String,
    pub eta: f64,
    pub temperature: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: "langevin".into(),
            eta: 2e-3,
            temperature: 2e-3,
            steps: 200_000,
            burn_in: 40_000,
            thin: 1000,
            chains: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Explicit order-parameter sweep (`Qbar = q 1`); empty means use the
    /// solved order parameter for each load.
    pub qbar: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    /// Size list as (patterns, width-dial) pairs sharing one load.
    pub sizes: Vec<[usize; 2]>,
    /// Skip Monte Carlo and emit the theory scaling law alone, anchored at
    /// the first size.
    pub theory_only: bool,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSweepSection {
    /// Channel counts for the theory curves.
    pub channels: Vec<usize>,
    /// Subset of `channels` that also gets a Monte Carlo spot check.
    pub mc_channels: Vec<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub geometry: GeometrySection,
    pub model: ModelSection,
    pub solve: SolveSection,
    pub train: TrainSection,
    pub predict: PredictSection,
    pub scaling: ScalingSection,
    #[serde(rename = "channel-sweep")]
    pub channel_sweep: ChannelSweepSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply the command-line seed override before hashing or running.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.data.seed = s;
        }
    }

    /// Canonical serialization of the resolved configuration; the hash of
    /// this text identifies the experiment.
    pub fn canonical_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("config serialize: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        let text = self.canonical_text()?;
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.p == 0 || self.data.n0 == 0 {
            return Err(CliError::config("data.p and data.n0 must be positive"));
        }
        match self.data.source.as_str() {
            "teacher" => {}
            "images" => {
                if self.data.pixels.is_none() || self.data.labels.is_none() {
                    return Err(CliError::config(
                        "images source needs data.pixels and data.labels paths",
                    ));
                }
            }
            other => {
                return Err(CliError::config(format!(
                    "unknown data.source '{other}' (expected teacher or images)"
                )))
            }
        }
        if self.model.channels == 0 {
            return Err(CliError::config("model.channels must be positive"));
        }
        if self.model.order == 0 {
            return Err(CliError::config("model.order must be positive"));
        }
        self.architecture()?;
        self.activation()?;
        self.beta()?;
        self.optimizer()?;
        let geom = self.build_geometry()?;
        if self.architecture()? == Architecture::FullyConnected && geom.patch_count() != 1 {
            return Err(CliError::config(
                "fully-connected architecture needs geometry.kind = \"fc\"",
            ));
        }
        if !(self.model.lambda0 > 0.0 && self.model.lambda1 > 0.0) {
            return Err(CliError::config("lambda0 and lambda1 must be positive"));
        }
        for &a in &self.solve.alphas {
            if !(a >= 0.0) {
                return Err(CliError::config("solve.alphas entries must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::parse(&self.model.architecture).map_err(CliError::from)
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.model.activation).ok_or_else(|| {
            CliError::config(format!(
                "unknown model.activation '{}' (expected linear, erf, or tanh)",
                self.model.activation
            ))
        })
    }

    pub fn beta(&self) -> Result<Beta> {
        Beta::parse(&self.model.beta).map_err(CliError::from)
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::parse(&self.train.optimizer).map_err(CliError::from)
    }

    fn build_geometry(&self) -> Result<ConvGeometry> {
        let n0 = self.data.n0;
        match self.geometry.kind.as_str() {
            "fc" => ConvGeometry::fully_connected(n0).map_err(CliError::from),
            "1d" => {
                ConvGeometry::one_dim(n0, self.geometry.m, self.geometry.s).map_err(CliError::from)
            }
            "2d" => {
                let side = (n0 as f64).sqrt().round() as usize;
                if side * side != n0 {
                    return Err(CliError::config(format!(
                        "geometry.kind = \"2d\" needs a square input dimension, got n0 = {n0}"
                    )));
                }
                ConvGeometry::two_dim(side, self.geometry.m).map_err(CliError::from)
            }
            other => Err(CliError::config(format!(
                "unknown geometry.kind '{other}' (expected fc, 1d, or 2d)"
            ))),
        }
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        self.build_geometry()
    }

    /// Loads to solve at: the configured list, or the single load implied by
    /// the model width.
    pub fn alphas(&self) -> Vec<f64> {
        if self.solve.alphas.is_empty() {
            vec![self.data.p as f64 / self.model.channels as f64]
        } else {
            self.solve.alphas.clone()
        }
    }

    pub fn saddle_options(&self) -> fwnet_core::SaddleOptions {
        fwnet_core::SaddleOptions {
            tol: self.solve.tol,
            max_iter: self.solve.max_iter,
            damping: self.solve.damping,
        }
    }

    fn input_scale(&self) -> f64 {
        if self.data.scale_inputs {
            self.model.lambda0.sqrt()
        } else {
            1.0
        }
    }

    /// Training and held-out datasets. Teacher data draws the splits from
    /// offset seeds with the shared teacher; image data reserves the last
    /// `test_p` rows.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let scale = self.input_scale();
        match self.data.source.as_str() {
            "teacher" => {
                let mut train = generate_linear_teacher(self.data.p, self.data.n0, self.data.seed)?;
                train.x *= scale;
                let test = if self.data.test_p > 0 {
                    let mut t = generate_linear_teacher(
                        self.data.test_p,
                        self.data.n0,
                        self.data.seed.wrapping_add(TEST_SEED_OFFSET),
                    )?;
                    t.x *= scale;
                    Some(t)
                } else {
                    None
                };
                Ok((train, test))
            }
            "images" => {
                let side = (self.data.n0 as f64).sqrt().round() as usize;
                if side * side != self.data.n0 {
                    return Err(CliError::config(
                        "images source needs a square input dimension",
                    ));
                }
                let pixels = self.data.pixels.as_ref().expect("validated");
                let labels = self.data.labels.as_ref().expect("validated");
                let full = load_grayscale_images(pixels, labels, side)?;
                let need = self.data.p + self.data.test_p;
                if full.p() < need {
                    return Err(CliError::config(format!(
                        "image set has {} rows, config needs {need}",
                        full.p()
                    )));
                }
                let train = Dataset::new(
                    full.x.rows(0, self.data.p).into_owned() * scale,
                    full.y.rows(0, self.data.p).into_owned(),
                )?;
                let test = if self.data.test_p > 0 {
                    Some(Dataset::new(
                        full.x.rows(self.data.p, self.data.test_p).into_owned() * scale,
                        full.y.rows(self.data.p, self.data.test_p).into_owned(),
                    )?)
                } else {
                    None
                };
                Ok((train, test))
            }
            _ => unreachable!("validated"),
        }
    }

    /// Sampler schedule for one chain.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            optimizer: self.optimizer()?,
            eta: self.train.eta,
            temperature: self.train.temperature,
            steps: self.train.steps,
            burn_in: self.train.burn_in,
            thin: self.train.thin,
            seed,
            train_bias: false,
        })
    }
}
