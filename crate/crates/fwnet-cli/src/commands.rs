//! Subcommand implementations. Every command is a pure function of the
//! resolved configuration (plus the seed override), writing result tables
//! whose rows all carry the configuration hash; only header timestamps
//! distinguish reruns.

use std::path::PathBuf;

use nalgebra::DMatrix;

use fwnet_core::io::{self, SolutionRecord};

use crate::channel_sweep::run_channel_sweep;
use crate::config::ExperimentConfig;
use crate::csvio::{fmt, write_table, TableSpec};
use crate::pipeline::{ensure_kernel, Theory};
use crate::scaling::{run_scaling, ScalingReport};
use crate::verify::fast_criteria;
use crate::{CliError, Result};

/// Everything a command needs besides its own section: the resolved
/// configuration, its hash, and where to write.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).map_err(|e| {
            CliError::config(format!("cannot create output dir {}: {e}", out_dir.display()))
        })?;
        let hash = cfg.hash()?;
        Ok(Self { cfg, out_dir, hash })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn kernel_cache_path(&self) -> PathBuf {
        self.path(&format!("kernel-{}.bin", &self.hash[..16]))
    }
}

const DIAGONAL_NOTE: &str =
    "block statistics exclude the diagonal pairs (mu = nu) of the similarity matrix";

fn status(ok: Option<bool>) -> String {
    match ok {
        Some(true) => "pass".into(),
        Some(false) => "fail".into(),
        None => "na".into(),
    }
}

/// `gen-data`: write the training and held-out datasets.
pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let (train, test) = ctx.cfg.datasets()?;
    let train_path = ctx.path("dataset.txt");
    io::save_dataset(&train_path, &train)?;
    log::info!("wrote {} ({} patterns)", train_path.display(), train.p());
    if let Some(test) = test {
        let test_path = ctx.path("test-dataset.txt");
        io::save_dataset(&test_path, &test)?;
        log::info!("wrote {} ({} patterns)", test_path.display(), test.p());
    }
    Ok(())
}

const KERNEL_SPEC: TableSpec = TableSpec {
    schema: "kernel v1",
    columns: &["patterns", "patches", "activation", "lambda0", "from_cache", "config_hash"],
};

/// `kernel`: build (or load) the infinite-width kernel cache.
pub fn cmd_kernel(ctx: &Ctx) -> Result<()> {
    let (train, _) = ctx.cfg.datasets()?;
    let theory = Theory::from_config(&ctx.cfg)?;
    let cache = ctx.kernel_cache_path();
    let (lk, cached) = ensure_kernel(&theory, &train.x, &cache)?;
    if cached {
        log::info!("kernel cache {} is current, skipping recomputation", cache.display());
    } else {
        log::info!("computed kernel and wrote {}", cache.display());
    }
    let row = vec![
        lk.n_patterns().to_string(),
        lk.n_patches().to_string(),
        theory.activation.name().to_string(),
        fmt(theory.lambda0),
        cached.to_string(),
        ctx.hash.clone(),
    ];
    write_table(&ctx.path("kernel.csv"), &KERNEL_SPEC, &ctx.hash, &[], &[row])
}

const SOLVE_SPEC: TableSpec = TableSpec {
    schema: "solve v1",
    columns: &[
        "alpha",
        "architecture",
        "patches",
        "converged",
        "iterations",
        "residual",
        "qbar_min_eig",
        "qbar_mean_diag",
        "record",
        "config_hash",
    ],
};

/// `solve`: sweep the saddle equations over the load list and record the
/// solutions.
pub fn cmd_solve(ctx: &Ctx) -> Result<()> {
    let (train, _) = ctx.cfg.datasets()?;
    let theory = Theory::from_config(&ctx.cfg)?;
    let beta = ctx.cfg.beta()?;
    let opts = ctx.cfg.saddle_options();
    let (lk, _) = ensure_kernel(&theory, &train.x, &ctx.kernel_cache_path())?;
    let mut rows = Vec::new();
    let mut unconverged = Vec::new();
    for (i, alpha) in ctx.cfg.alphas().into_iter().enumerate() {
        let sol = theory.solve(&lk, &train.y, alpha, beta, &opts)?;
        let record = format!("solution-{i}.txt");
        io::save_solution(
            &ctx.path(&record),
            &SolutionRecord {
                solution: sol.clone(),
                alpha,
                lambda1: theory.lambda1,
                beta,
            },
        )?;
        if !sol.converged {
            unconverged.push(alpha);
        }
        rows.push(vec![
            fmt(alpha),
            sol.architecture.name().to_string(),
            sol.qbar.nrows().to_string(),
            sol.converged.to_string(),
            sol.iterations.to_string(),
            fmt(sol.residual),
            fmt(sol.qbar_min_eigenvalue),
            fmt(sol.qbar.diagonal().mean()),
            record,
            ctx.hash.clone(),
        ]);
    }
    write_table(&ctx.path("solve.csv"), &SOLVE_SPEC, &ctx.hash, &[], &rows)?;
    if let Some(alpha) = unconverged.first() {
        return Err(CliError::check(format!(
            "saddle iteration did not converge at alpha = {alpha}; records are flagged"
        )));
    }
    Ok(())
}

const PREDICT_SPEC: TableSpec = TableSpec {
    schema: "predict v1",
    columns: &[
        "case",
        "alpha",
        "qbar_mean_diag",
        "test_index",
        "y0",
        "gamma",
        "sigma2",
        "gen_error",
        "config_hash",
    ],
};

/// `predict`: Bayesian predictor statistics on the held-out set, either at
/// explicitly given scalar order parameters or at the solved ones per load.
pub fn cmd_predict(ctx: &Ctx) -> Result<()> {
    let (train, test) = ctx.cfg.datasets()?;
    let theory = Theory::from_config(&ctx.cfg)?;
    let beta = ctx.cfg.beta()?;
    let (lk, _) = ensure_kernel(&theory, &train.x, &ctx.kernel_cache_path())?;
    let np = lk.n_patches();
    let mut rows = Vec::new();
    if let Some(test) = &test {
        let mut cases: Vec<(String, f64, DMatrix<f64>)> = Vec::new();
        if ctx.cfg.predict.qbar.is_empty() {
            let opts = ctx.cfg.saddle_options();
            for alpha in ctx.cfg.alphas() {
                let sol = theory.solve(&lk, &train.y, alpha, beta, &opts)?;
                cases.push(("solved".into(), alpha, sol.qbar));
            }
        } else {
            for &q in &ctx.cfg.predict.qbar {
                if !(q > 0.0) {
                    return Err(CliError::config("predict.qbar entries must be positive"));
                }
                cases.push(("explicit".into(), f64::NAN, DMatrix::identity(np, np) * q));
            }
        }
        for (case, alpha, qbar) in &cases {
            for t in 0..test.p() {
                let x0 = test.x.row(t).transpose();
                let st = theory.point_stats(&lk, &train, qbar, &x0, test.y[t], beta)?;
                rows.push(vec![
                    case.clone(),
                    fmt(*alpha),
                    fmt(qbar.diagonal().mean()),
                    t.to_string(),
                    fmt(test.y[t]),
                    fmt(st.gamma),
                    fmt(st.sigma2),
                    fmt(st.gen_error),
                    ctx.hash.clone(),
                ]);
            }
        }
    } else {
        log::info!("no held-out points configured; writing an empty prediction table");
    }
    write_table(&ctx.path("predict.csv"), &PREDICT_SPEC, &ctx.hash, &[], &rows)
}

const SIMULATE_SPEC: TableSpec = TableSpec {
    schema: "simulate v1",
    columns: &[
        "block",
        "theory_mean",
        "measured_mean",
        "mean_se",
        "mean_band",
        "mean_status",
        "theory_var",
        "measured_var",
        "var_se",
        "var_naive",
        "noise_floor",
        "var_band",
        "var_status",
        "chains",
        "snapshots_min",
        "drift_max",
        "n1",
        "config_hash",
    ],
};

const CHAINS_SPEC: TableSpec = TableSpec {
    schema: "chains v1",
    columns: &["chain", "seed", "snapshots", "final_data_loss", "plateau_drift", "config_hash"],
};

fn block_cells(b: &crate::scaling::BlockReport) -> Vec<String> {
    vec![
        b.name.to_string(),
        fmt(b.theory_mean),
        fmt(b.measured_mean),
        fmt(b.mean_se),
        fmt(b.mean_band),
        status(b.mean_ok),
        fmt(b.theory_var),
        fmt(b.measured_var),
        fmt(b.var_se),
        fmt(b.var_naive),
        fmt(b.noise_floor),
        fmt(b.var_band),
        status(b.var_ok),
    ]
}

fn warn_on_beta_mismatch(cfg: &ExperimentConfig) -> Result<()> {
    let beta = cfg.beta()?;
    let target = 1.0 / cfg.train.temperature;
    let mismatch = match beta {
        fwnet_core::Beta::Infinite => true,
        fwnet_core::Beta::Finite(b) => (b - target).abs() > 1e-9 * target,
    };
    if mismatch {
        log::warn!(
            "model.beta is not 1/train.temperature = {target}; theory and sampler \
             describe different ensembles"
        );
    }
    Ok(())
}

/// `simulate`: one Monte Carlo ensemble at the configured size, compared
/// against the theory per label block.
pub fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    warn_on_beta_mismatch(&ctx.cfg)?;
    let mut cfg = ctx.cfg.clone();
    cfg.scaling.sizes = vec![[cfg.data.p, cfg.model.channels]];
    cfg.scaling.theory_only = false;
    let report = run_scaling(&cfg)?;
    let size = &report.sizes[0];
    let mut rows = Vec::new();
    for b in &size.blocks {
        let mut row = block_cells(b);
        row.push(size.chains.to_string());
        row.push(size.snapshots_min.to_string());
        row.push(fmt(size.drift_max));
        row.push(size.n1.to_string());
        row.push(ctx.hash.clone());
        rows.push(row);
    }
    write_table(
        &ctx.path("simulate.csv"),
        &SIMULATE_SPEC,
        &ctx.hash,
        &[DIAGONAL_NOTE.into()],
        &rows,
    )?;
    let chain_rows: Vec<Vec<String>> = size
        .chain_details
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                i.to_string(),
                c.seed.to_string(),
                c.snapshots.to_string(),
                fmt(c.final_data_loss),
                fmt(c.plateau_drift),
                ctx.hash.clone(),
            ]
        })
        .collect();
    write_table(&ctx.path("chains.csv"), &CHAINS_SPEC, &ctx.hash, &[], &chain_rows)?;
    if !size.converged {
        return Err(CliError::check("saddle solve did not converge for the simulated size"));
    }
    Ok(())
}

const SCALING_SPEC: TableSpec = TableSpec {
    schema: "scaling v1",
    columns: &[
        "p",
        "channels",
        "n1",
        "alpha",
        "converged",
        "residual",
        "chains",
        "snapshots_min",
        "drift_max",
        "block",
        "theory_mean",
        "measured_mean",
        "mean_se",
        "mean_band",
        "mean_status",
        "theory_var",
        "measured_var",
        "var_se",
        "var_naive",
        "noise_floor",
        "var_band",
        "var_status",
        "config_hash",
    ],
};

const SLOPES_SPEC: TableSpec = TableSpec {
    schema: "scaling-slopes v1",
    columns: &["quantity", "source", "method", "slope", "se", "points", "config_hash"],
};

fn write_scaling_tables(ctx: &Ctx, report: &ScalingReport) -> Result<()> {
    let mut rows = Vec::new();
    for size in &report.sizes {
        for b in &size.blocks {
            let mut row = vec![
                size.p.to_string(),
                size.channels.to_string(),
                size.n1.to_string(),
                fmt(size.alpha),
                size.converged.to_string(),
                fmt(size.residual),
                size.chains.to_string(),
                size.snapshots_min.to_string(),
                fmt(size.drift_max),
            ];
            row.extend(block_cells(b));
            row.push(ctx.hash.clone());
            rows.push(row);
        }
    }
    write_table(
        &ctx.path("scaling.csv"),
        &SCALING_SPEC,
        &ctx.hash,
        &[DIAGONAL_NOTE.into()],
        &rows,
    )?;
    let slope_rows: Vec<Vec<String>> = report
        .slopes
        .iter()
        .map(|s| {
            vec![
                s.quantity.to_string(),
                s.source.to_string(),
                s.method.to_string(),
                fmt(s.slope),
                fmt(s.se),
                s.points.to_string(),
                ctx.hash.clone(),
            ]
        })
        .collect();
    write_table(&ctx.path("scaling-slopes.csv"), &SLOPES_SPEC, &ctx.hash, &[], &slope_rows)
}

/// `scaling`: size sweep at fixed load with block comparisons and fitted
/// exponents.
pub fn cmd_scaling(ctx: &Ctx) -> Result<()> {
    if !ctx.cfg.scaling.theory_only {
        warn_on_beta_mismatch(&ctx.cfg)?;
    }
    if ctx.cfg.scaling.sizes.len() == 2 {
        log::info!(
            "a least-squares fit needs at least three sizes; emitting two-point exponents"
        );
    }
    let report = run_scaling(&ctx.cfg)?;
    write_scaling_tables(ctx, &report)?;
    let bad: Vec<String> = report
        .sizes
        .iter()
        .filter(|s| !s.converged)
        .map(|s| format!("(p = {}, width = {})", s.p, s.channels))
        .collect();
    if !bad.is_empty() {
        return Err(CliError::check(format!(
            "saddle iteration did not converge at {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

const SWEEP_SPEC: TableSpec = TableSpec {
    schema: "channel-sweep v1",
    columns: &[
        "channels",
        "alpha",
        "converged",
        "cnn_loss",
        "fc_n1",
        "fc_converged",
        "fc_loss",
        "cnn_infinite",
        "fc_infinite",
        "mc_mean",
        "mc_sd",
        "mc_se",
        "mc_chains",
        "config_hash",
    ],
};

/// `channel-sweep`: theory loss curves over the channel grid plus Monte
/// Carlo spot checks.
pub fn cmd_channel_sweep(ctx: &Ctx) -> Result<()> {
    if !ctx.cfg.channel_sweep.mc_channels.is_empty() {
        warn_on_beta_mismatch(&ctx.cfg)?;
    }
    let report = run_channel_sweep(&ctx.cfg)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.channels.to_string(),
                fmt(r.alpha),
                r.converged.to_string(),
                fmt(r.cnn_loss),
                r.fc_n1.to_string(),
                r.fc_converged.to_string(),
                fmt(r.fc_loss),
                fmt(report.cnn_infinite),
                fmt(report.fc_infinite),
                fmt(r.mc_mean),
                fmt(r.mc_sd),
                fmt(r.mc_se),
                r.mc_chains.to_string(),
                ctx.hash.clone(),
            ]
        })
        .collect();
    write_table(&ctx.path("channel-sweep.csv"), &SWEEP_SPEC, &ctx.hash, &[], &rows)?;
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !(r.converged && r.fc_converged))
        .map(|r| r.channels.to_string())
        .collect();
    if !bad.is_empty() {
        return Err(CliError::check(format!(
            "saddle iteration did not converge at widths {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

const VERIFY_SPEC: TableSpec = TableSpec {
    schema: "verify v1",
    columns: &[
        "criterion",
        "module",
        "invariant",
        "passed",
        "observed",
        "bound",
        "seconds",
        "config_hash",
    ],
};

fn sanitize(text: &str) -> String {
    text.replace(',', ";")
}

/// `verify`: run the fast invariant suite, print one line per check, and
/// serialize the report as text and CSV.
pub fn cmd_verify(ctx: &Ctx) -> Result<()> {
    let checks = fast_criteria(ctx.cfg.data.seed)?;
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for c in &checks {
        let line = c.line();
        println!("{line}");
        lines.push(line);
        rows.push(vec![
            c.criterion.to_string(),
            c.module.to_string(),
            sanitize(c.invariant),
            c.passed.to_string(),
            sanitize(&c.observed),
            sanitize(&c.bound),
            fmt(c.seconds),
            ctx.hash.clone(),
        ]);
    }
    std::fs::write(ctx.path("verify.txt"), lines.join("\n") + "\n")
        .map_err(|e| CliError::config(format!("cannot write verify.txt: {e}")))?;
    write_table(&ctx.path("verify.csv"), &VERIFY_SPEC, &ctx.hash, &[], &rows)?;
    let failed: Vec<String> =
        checks.iter().filter(|c| !c.passed).map(|c| c.criterion.to_string()).collect();
    if !failed.is_empty() {
        return Err(CliError::check(format!("criteria failed: {}", failed.join(", "))));
    }
    Ok(())
}

/// Shared helper for tests and main: run one named subcommand.
pub fn dispatch(name: &str, ctx: &Ctx) -> Result<()> {
    match name {
        "gen-data" => cmd_gen_data(ctx),
        "kernel" => cmd_kernel(ctx),
        "solve" => cmd_solve(ctx),
        "predict" => cmd_predict(ctx),
        "simulate" => cmd_simulate(ctx),
        "scaling" => cmd_scaling(ctx),
        "channel-sweep" => cmd_channel_sweep(ctx),
        "verify" => cmd_verify(ctx),
        other => Err(CliError::config(format!("unknown subcommand '{other}'"))),
    }
}
