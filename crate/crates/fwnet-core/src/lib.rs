//! Finite-width Bayesian theory of one-hidden-layer networks in the
//! proportional regime, where the training-set size `P` and the hidden-layer
//! width `N1` (channel count `N_c` for convolutional architectures) grow at
//! fixed ratio `alpha = P / N1`.
//!
//! The crate has two halves that deliberately never share numerical code:
//!
//! * an analytic half ([`kernel`], [`saddle`], [`predictor`]) that builds
//!   infinite-width kernels, renormalizes them through the order parameters
//!   `Q`, `Q-bar` of a saddle-point calculation, and evaluates Bayesian
//!   predictor statistics and similarity-matrix shifts at finite width;
//! * a sampling half ([`oracle`]) that draws from the very same Gibbs
//!   posterior by running noisy gradient-descent (Langevin) chains on actual
//!   network parameters, so every analytic formula can be checked against an
//!   independent Monte Carlo estimate.
//!
//! [`data`] holds datasets and patch geometry, [`stats`] the autocorrelation
//! and slope-fitting helpers used by the experiment harness, and [`io`] the
//! cache/record file formats shared with the command-line tools.

pub mod activation;
pub mod data;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod predictor;
pub mod quad;
pub mod saddle;
pub mod stats;

pub use activation::Activation;
pub use data::{Beta, ConvGeometry, Dataset, Dimensionality, Hyperparameters};
pub use error::CoreError;
pub use kernel::{LocalKernel, TestVectors};
pub use saddle::{Architecture, SaddleOptions, SaddleSolution};
