//! Monte-Carlo oracle: finite-width networks trained with noisy gradient
//! dynamics so that their stationary distribution is the Gibbs posterior the
//! analytic pipeline describes.
//!
//! The model is a one-hidden-layer network read out as `f = phi v / sqrt(N1)`
//! where `phi` collects the hidden activations. Three weight layouts are
//! supported: fully connected (one weight row per channel acting on the whole
//! input), locally connected (independent weights per channel and patch), and
//! convolutional (weights shared across patches). The training loss is
//!
//! `L = 1/2 sum_mu (y_mu - f_mu)^2 + T lambda0/2 |W|^2 + T lambda1/2 |v|^2`
//!
//! and Langevin updates `theta -= eta grad - sqrt(2 T eta) xi` leave
//! `exp(-L/T)` invariant in the small-step limit, which makes long runs an
//! independent check of every analytic prediction in this crate.

pub mod reduced;
pub mod similarity;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::Activation;
use crate::data::{ConvGeometry, Dataset};
use crate::error::{CoreError, Result};
use crate::kernel::gather_patches;
use crate::saddle::Architecture;

/// Loss threshold beyond which a run is declared divergent.
pub(crate) const DIVERGENCE_LOSS: f64 = 1e12;

/// Static description of a finite-width network: architecture, patch
/// geometry, channel count, and activation.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub architecture: Architecture,
    pub geometry: ConvGeometry,
    pub channels: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn new(
        architecture: Architecture,
        geometry: ConvGeometry,
        channels: usize,
        activation: Activation,
    ) -> Result<Self> {
        geometry.validate()?;
        if channels == 0 {
            return Err(CoreError::config("channel count must be positive"));
        }
        if architecture == Architecture::FullyConnected && geometry.patch_count() != 1 {
            return Err(CoreError::config(
                "fully connected networks require a single patch covering the input",
            ));
        }
        Ok(Self { architecture, geometry, channels, activation })
    }

    /// Fully connected network on a flat input of dimension `n0`.
    pub fn fully_connected(n0: usize, channels: usize, activation: Activation) -> Result<Self> {
        let geometry = ConvGeometry::one_dim(n0, n0, n0)?;
        Self::new(Architecture::FullyConnected, geometry, channels, activation)
    }

    /// Total hidden width `N1 = channels * patch_count`.
    pub fn hidden_width(&self) -> usize {
        self.channels * self.geometry.patch_count()
    }

    /// Number of independent weight rows: channels for shared weights,
    /// channels times patches for unshared ones.
    pub fn weight_rows(&self) -> usize {
        match self.architecture {
            Architecture::FullyConnected | Architecture::Convolutional => self.channels,
            Architecture::LocallyConnected => self.channels * self.geometry.patch_count(),
        }
    }

    /// Input dimension seen by one weight row.
    pub fn weight_cols(&self) -> usize {
        match self.architecture {
            Architecture::FullyConnected => self.geometry.n0,
            _ => self.geometry.mask_size(),
        }
    }

    /// Normalization of the pre-activation: `sqrt` of the fan-in.
    fn preactivation_scale(&self) -> f64 {
        (self.weight_cols() as f64).sqrt()
    }
}

/// All trainable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    /// Hidden weights, one row per independent filter.
    pub w: DMatrix<f64>,
    /// Readout weights, one per hidden unit.
    pub v: DVector<f64>,
    /// Hidden biases, one per hidden unit (zero unless bias training is on).
    pub b: DVector<f64>,
}

impl NetParams {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            w: DMatrix::zeros(cfg.weight_rows(), cfg.weight_cols()),
            v: DVector::zeros(cfg.hidden_width()),
            b: DVector::zeros(cfg.hidden_width()),
        }
    }

    fn squared_norms(&self) -> (f64, f64) {
        (self.w.iter().map(|x| x * x).sum(), self.v.iter().map(|x| x * x).sum())
    }
}

/// Draw parameters from the Gaussian prior: `W ~ N(0, 1/lambda0)` entrywise,
/// `v ~ N(0, 1/lambda1)`, biases zero. The draw order (weights row by row,
/// then readout) is part of the reproducibility contract.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &NetConfig,
    lambda0: f64,
    lambda1: f64,
    rng: &mut R,
) -> NetParams {
    let sw = lambda0.recip().sqrt();
    let sv = lambda1.recip().sqrt();
    let mut params = NetParams::zeros(cfg);
    for r in 0..params.w.nrows() {
        for c in 0..params.w.ncols() {
            let z: f64 = StandardNormal.sample(rng);
            params.w[(r, c)] = sw * z;
        }
    }
    for i in 0..params.v.len() {
        let z: f64 = StandardNormal.sample(rng);
        params.v[i] = sv * z;
    }
    params
}

/// Patch-gathered view of a batch of inputs, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    /// Raw inputs, one pattern per row.
    pub x: DMatrix<f64>,
    /// One `P x mask_size` matrix per patch (empty for fully connected
    /// networks, which consume `x` directly).
    pub patches: Vec<DMatrix<f64>>,
}

impl BatchInputs {
    pub fn new(cfg: &NetConfig, x: &DMatrix<f64>) -> Result<Self> {
        if x.ncols() != cfg.geometry.n0 {
            return Err(CoreError::config(format!(
                "input dimension {} does not match geometry n0 {}",
                x.ncols(),
                cfg.geometry.n0
            )));
        }
        let patches = if cfg.architecture == Architecture::FullyConnected {
            Vec::new()
        } else {
            gather_patches(x, &cfg.geometry)
        };
        Ok(Self { x: x.clone(), patches })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Pre-activations and activations for a batch: both are `P x N1` with the
/// hidden unit for channel `c` and patch `i` stored in column `c * n_p + i`.
#[derive(Debug, Clone)]
pub struct Hidden {
    pub h: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

/// Compute pre-activations `h` and activations `phi` for every pattern.
pub fn hidden_activations(cfg: &NetConfig, inputs: &BatchInputs, params: &NetParams) -> Hidden {
    let p = inputs.len();
    let n1 = cfg.hidden_width();
    let np = cfg.geometry.patch_count();
    let scale = cfg.preactivation_scale().recip();
    let mut h = DMatrix::zeros(p, n1);
    let wt = params.w.transpose();
    match cfg.architecture {
        Architecture::FullyConnected => {
            // h = X W^T / sqrt(N0), one column per channel.
            h.gemm(scale, &inputs.x, &wt, 0.0);
        }
        Architecture::Convolutional => {
            // Shared weights: one skinny product per patch, scattered into
            // the interleaved column layout.
            let mut block = DMatrix::zeros(p, cfg.channels);
            for (i, xp) in inputs.patches.iter().enumerate() {
                block.gemm(scale, xp, &wt, 0.0);
                for c in 0..cfg.channels {
                    h.column_mut(c * np + i).copy_from(&block.column(c));
                }
            }
        }
        Architecture::LocallyConnected => {
            // Independent weights: column c * n_p + i of W^T serves patch i
            // of channel c.
            let mut block = DMatrix::zeros(p, cfg.channels);
            for (i, xp) in inputs.patches.iter().enumerate() {
                let cols: Vec<usize> = (0..cfg.channels).map(|c| c * np + i).collect();
                let wi = wt.select_columns(cols.iter());
                block.gemm(scale, xp, &wi, 0.0);
                for c in 0..cfg.channels {
                    h.column_mut(c * np + i).copy_from(&block.column(c));
                }
            }
        }
    }
    for j in 0..n1 {
        let bj = params.b[j];
        if bj != 0.0 {
            h.column_mut(j).add_scalar_mut(bj);
        }
    }
    let mut phi = h.clone();
    let act = cfg.activation;
    phi.apply(|v| *v = act.apply(*v));
    Hidden { h, phi }
}

/// Network outputs `f = phi v / sqrt(N1)`.
pub fn forward_from_phi(phi: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n1 = v.len() as f64;
    (phi * v) / n1.sqrt()
}

/// Outputs for a batch of raw inputs.
pub fn forward(cfg: &NetConfig, inputs: &BatchInputs, params: &NetParams) -> DVector<f64> {
    let hidden = hidden_activations(cfg, inputs, params);
    forward_from_phi(&hidden.phi, &params.v)
}

/// Training loss: squared error plus temperature-scaled Gaussian priors.
/// At `temperature = 0` the prior terms vanish and the loss is pure data.
pub fn loss(
    cfg: &NetConfig,
    inputs: &BatchInputs,
    y: &DVector<f64>,
    params: &NetParams,
    lambda0: f64,
    lambda1: f64,
    temperature: f64,
) -> f64 {
    let f = forward(cfg, inputs, params);
    data_loss(&f, y) + prior_loss(params, lambda0, lambda1, temperature)
}

fn data_loss(f: &DVector<f64>, y: &DVector<f64>) -> f64 {
    0.5 * (y - f).norm_squared()
}

fn prior_loss(params: &NetParams, lambda0: f64, lambda1: f64, temperature: f64) -> f64 {
    let (w2, v2) = params.squared_norms();
    0.5 * temperature * (lambda0 * w2 + lambda1 * v2)
}

/// Loss and its gradient with respect to every parameter block. The bias
/// gradient is only filled in when `train_bias` is set; otherwise biases stay
/// frozen at their current value.
pub fn loss_and_grad(
    cfg: &NetConfig,
    inputs: &BatchInputs,
    y: &DVector<f64>,
    params: &NetParams,
    lambda0: f64,
    lambda1: f64,
    temperature: f64,
    train_bias: bool,
) -> (f64, NetParams) {
    let hidden = hidden_activations(cfg, inputs, params);
    let f = forward_from_phi(&hidden.phi, &params.v);
    let err = y - &f;
    let value = 0.5 * err.norm_squared() + prior_loss(params, lambda0, lambda1, temperature);

    let n1 = cfg.hidden_width();
    let np = cfg.geometry.patch_count();
    let inv_sqrt_n1 = (n1 as f64).sqrt().recip();

    // Readout gradient: -phi^T err / sqrt(N1) + T lambda1 v.
    let mut grad_v = params.v.clone() * (temperature * lambda1);
    grad_v.gemv_tr(-inv_sqrt_n1, &hidden.phi, &err, 1.0);

    // Backpropagated hidden sensitivity G_{mu j} = err_mu v_j sigma'(h_{mu j}),
    // already carrying the 1/sqrt(N1) readout factor.
    let act = cfg.activation;
    let mut g = hidden.h;
    match act {
        // tanh'(h) = 1 - phi^2 is cheaper than re-evaluating tanh.
        Activation::Tanh => {
            g.zip_apply(&hidden.phi, |gv, ph| *gv = 1.0 - ph * ph);
        }
        _ => {
            g.apply(|v| *v = act.derivative(*v));
        }
    }
    for j in 0..n1 {
        let vj = params.v[j] * inv_sqrt_n1;
        for mu in 0..err.len() {
            g[(mu, j)] *= err[mu] * vj;
        }
    }

    let scale = cfg.preactivation_scale().recip();
    let mut grad_w = params.w.clone() * (temperature * lambda0);
    match cfg.architecture {
        Architecture::FullyConnected => {
            // grad_W = -G^T X / sqrt(N0) + T lambda0 W.
            grad_w.gemm_tr(-scale, &g, &inputs.x, 1.0);
        }
        Architecture::Convolutional => {
            let mut gi = DMatrix::zeros(inputs.len(), cfg.channels);
            for (i, xp) in inputs.patches.iter().enumerate() {
                for c in 0..cfg.channels {
                    gi.column_mut(c).copy_from(&g.column(c * np + i));
                }
                grad_w.gemm_tr(-scale, &gi, xp, 1.0);
            }
        }
        Architecture::LocallyConnected => {
            let mut row = DVector::zeros(cfg.weight_cols());
            for (i, xp) in inputs.patches.iter().enumerate() {
                for c in 0..cfg.channels {
                    row.gemv_tr(-scale, xp, &g.column(c * np + i), 0.0);
                    let mut target = grad_w.row_mut(c * np + i);
                    for k in 0..row.len() {
                        target[k] += row[k];
                    }
                }
            }
        }
    }

    let grad_b = if train_bias {
        // grad_b_j = -sum_mu G_{mu j} (no prior on biases).
        let ones = DVector::from_element(inputs.len(), 1.0);
        let mut gb = DVector::zeros(n1);
        gb.gemv_tr(-1.0, &g, &ones, 0.0);
        gb
    } else {
        DVector::zeros(n1)
    };

    (value, NetParams { w: grad_w, v: grad_v, b: grad_b })
}

/// One Langevin update on a flat parameter slice:
/// `theta -= eta * grad - sqrt(2 T eta) * xi` with standard normal `xi`.
/// At zero temperature no noise is drawn, so the step is plain gradient
/// descent and consumes no randomness.
pub fn langevin_step<R: Rng + ?Sized>(
    theta: &mut [f64],
    grad: &[f64],
    eta: f64,
    temperature: f64,
    rng: &mut R,
) {
    debug_assert_eq!(theta.len(), grad.len());
    if temperature > 0.0 {
        let noise = (2.0 * temperature * eta).sqrt();
        for (t, g) in theta.iter_mut().zip(grad) {
            let z: f64 = StandardNormal.sample(rng);
            *t += -eta * g + noise * z;
        }
    } else {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= eta * g;
        }
    }
}

/// Update rule used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Noisy gradient descent targeting the Gibbs posterior.
    Langevin,
    /// Plain gradient descent (Langevin at zero temperature).
    GradientDescent,
    /// Adam with the usual exponential moment estimates.
    Adam,
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "langevin" => Ok(Self::Langevin),
            "gd" | "gradient-descent" => Ok(Self::GradientDescent),
            "adam" => Ok(Self::Adam),
            other => Err(CoreError::config(format!("unknown optimizer '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Langevin => "langevin",
            Self::GradientDescent => "gd",
            Self::Adam => "adam",
        }
    }
}

/// First and second moment accumulators for Adam, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Apply one bias-corrected Adam update in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], eta: f64) {
        debug_assert_eq!(theta.len(), self.m.len());
        debug_assert_eq!(theta.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= eta * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Sampler schedule: update rule, step size, temperature, and how long to
/// run, discard, and thin.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub eta: f64,
    pub temperature: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub train_bias: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(CoreError::config("step size eta must be positive and finite"));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(CoreError::config("temperature must be nonnegative and finite"));
        }
        if self.thin == 0 {
            return Err(CoreError::config("thinning interval must be positive"));
        }
        if self.burn_in >= self.steps {
            return Err(CoreError::config("burn-in must be shorter than the total run"));
        }
        if self.optimizer == Optimizer::Langevin && self.temperature == 0.0 {
            return Err(CoreError::config(
                "langevin sampling needs a positive temperature; use gd for zero temperature",
            ));
        }
        Ok(())
    }
}

/// Summary of one sampling run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Loss at the final step.
    pub final_loss: f64,
    /// Number of post-burn-in snapshots handed to the observer.
    pub snapshots: usize,
    /// Loss recorded every thinning interval over the whole run, for
    /// thermalization diagnostics: pairs of (step, loss).
    pub loss_trace: Vec<(usize, f64)>,
    /// Mean loss over the last fifth of the burn-in window.
    pub burn_in_tail_mean: f64,
}

/// Run the sampler and hand every retained snapshot to `observer` together
/// with its hidden activations. Snapshots are taken every `thin` steps once
/// `burn_in` steps have passed. A non-finite or exploding loss aborts with a
/// divergence error; everything already observed stays valid.
pub fn sample_posterior<F>(
    cfg: &NetConfig,
    data: &Dataset,
    lambda0: f64,
    lambda1: f64,
    tc: &TrainConfig,
    mut observer: F,
) -> Result<RunSummary>
where
    F: FnMut(usize, &NetParams, &DMatrix<f64>),
{
    tc.validate()?;
    let inputs = BatchInputs::new(cfg, &data.x)?;
    let mut rng = crate::data::seeded_rng(tc.seed);
    let mut params = init_params(cfg, lambda0, lambda1, &mut rng);
    let temperature = match tc.optimizer {
        Optimizer::GradientDescent => 0.0,
        _ => tc.temperature,
    };

    let dim_w = params.w.len();
    let dim_v = params.v.len();
    let total_dim = dim_w + dim_v + if tc.train_bias { params.b.len() } else { 0 };
    let mut adam = match tc.optimizer {
        Optimizer::Adam => Some(AdamState::new(total_dim)),
        _ => None,
    };
    let mut flat_theta = vec![0.0; total_dim];
    let mut flat_grad = vec![0.0; total_dim];

    let mut summary = RunSummary {
        final_loss: f64::NAN,
        snapshots: 0,
        loss_trace: Vec::new(),
        burn_in_tail_mean: f64::NAN,
    };
    let mut burn_tail_sum = 0.0;
    let mut burn_tail_count = 0usize;
    let burn_tail_start = tc.burn_in - tc.burn_in / 5;

    let mut value = f64::NAN;
    for step in 0..tc.steps {
        let (v, grad) = loss_and_grad(
            cfg,
            &inputs,
            &data.y,
            &params,
            lambda0,
            lambda1,
            temperature,
            tc.train_bias,
        );
        value = v;
        if !value.is_finite() || value > DIVERGENCE_LOSS {
            return Err(CoreError::Divergence {
                step,
                what: format!("loss reached {value:e}; reduce eta or rescale the problem"),
            });
        }

        if step % tc.thin == 0 {
            summary.loss_trace.push((step, value));
        }
        if step >= burn_tail_start && step < tc.burn_in {
            burn_tail_sum += value;
            burn_tail_count += 1;
        }

        flatten(&params, tc.train_bias, &mut flat_theta);
        flatten(&grad, tc.train_bias, &mut flat_grad);
        match (tc.optimizer, adam.as_mut()) {
            (Optimizer::Adam, Some(state)) => state.step(&mut flat_theta, &flat_grad, tc.eta),
            _ => langevin_step(&mut flat_theta, &flat_grad, tc.eta, temperature, &mut rng),
        }
        unflatten(&flat_theta, tc.train_bias, &mut params);

        let done = step + 1;
        if done > tc.burn_in && (done - tc.burn_in) % tc.thin == 0 {
            let hidden = hidden_activations(cfg, &inputs, &params);
            observer(done, &params, &hidden.phi);
            summary.snapshots += 1;
        }
    }

    summary.final_loss = value;
    if burn_tail_count > 0 {
        summary.burn_in_tail_mean = burn_tail_sum / burn_tail_count as f64;
    }
    Ok(summary)
}

fn flatten(params: &NetParams, with_bias: bool, out: &mut [f64]) {
    let dim_w = params.w.len();
    let dim_v = params.v.len();
    out[..dim_w].copy_from_slice(params.w.as_slice());
    out[dim_w..dim_w + dim_v].copy_from_slice(params.v.as_slice());
    if with_bias {
        out[dim_w + dim_v..].copy_from_slice(params.b.as_slice());
    }
}

fn unflatten(flat: &[f64], with_bias: bool, params: &mut NetParams) {
    let dim_w = params.w.len();
    let dim_v = params.v.len();
    params.w.as_mut_slice().copy_from_slice(&flat[..dim_w]);
    params.v.as_mut_slice().copy_from_slice(&flat[dim_w..dim_w + dim_v]);
    if with_bias {
        params.b.as_mut_slice().copy_from_slice(&flat[dim_w + dim_v..]);
    }
}
