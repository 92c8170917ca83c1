#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use alphavb::bench::{self, BenchSpec, Method, SolverSettings, SOLVER_SEED_OFFSET};
use alphavb::metrics::{self, Estimate, MetricBundle};
use alphavb::simgen::{self, SimConfig, SimInstance};
use alphavb::{precompute, Error};

#[derive(Parser)]
#[command(
    name = "alphavb",
    version,
    about = "Rényi-divergence variational inference for sparse linear regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and print parameters and metrics as JSON.
    Fit(FitArgs),
    /// Write a simulated dataset as CSV files.
    Simulate(SimulateArgs),
    /// Repeated fits at each alpha; writes long and aggregate CSVs.
    Bench(BenchArgs),
    /// Like `bench`, plus a gnuplot data file indexed by alpha.
    SweepAlpha(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Alphavb,
    Alphasvb,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Alphavb => Method::Alphavb,
            MethodArg::Alphasvb => Method::Alphasvb,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EstimateArg {
    Gm,
    MuSelected,
}

impl From<EstimateArg> for Estimate {
    fn from(e: EstimateArg) -> Self {
        match e {
            EstimateArg::Gm => Estimate::Gm,
            EstimateArg::MuSelected => Estimate::MuSelected,
        }
    }
}

/// Simulation design: a named configuration or explicit sizes.
#[derive(Args, Clone, Default)]
struct DesignArgs {
    /// Named configuration.
    #[arg(long, value_parser = ["i", "ii", "iii", "iv"])]
    config: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SolverArgs {
    /// Laplace slab rate.
    #[arg(long)]
    lambda: Option<f64>,
    /// Prior inclusion odds numerator.
    #[arg(long)]
    a0: Option<f64>,
    /// Prior inclusion odds denominator (default: p).
    #[arg(long)]
    b0: Option<f64>,
    /// Monte Carlo samples per iteration (alphasvb).
    #[arg(long)]
    k_samples: Option<usize>,
    /// Iterations (alphasvb).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr_mu: Option<f64>,
    #[arg(long)]
    lr_sigma: Option<f64>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    /// Componentwise gradient clip (alphasvb).
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Entropy tolerance between sweeps (alphavb).
    #[arg(long)]
    tol: Option<f64>,
    /// Sweep limit (alphavb).
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Inclusion threshold on gamma.
    #[arg(long)]
    gamma_threshold: Option<f64>,
    /// Point estimate used for l2 and mspe.
    #[arg(long, value_enum)]
    estimate: Option<EstimateArg>,
}

impl SolverArgs {
    /// Fields set here win over those in `other`.
    fn or(self, other: SolverArgs) -> SolverArgs {
        SolverArgs {
            lambda: self.lambda.or(other.lambda),
            a0: self.a0.or(other.a0),
            b0: self.b0.or(other.b0),
            k_samples: self.k_samples.or(other.k_samples),
            iters: self.iters.or(other.iters),
            lr_mu: self.lr_mu.or(other.lr_mu),
            lr_sigma: self.lr_sigma.or(other.lr_sigma),
            lr_gamma: self.lr_gamma.or(other.lr_gamma),
            grad_clip: self.grad_clip.or(other.grad_clip),
            tol: self.tol.or(other.tol),
            max_sweeps: self.max_sweeps.or(other.max_sweeps),
            gamma_threshold: self.gamma_threshold.or(other.gamma_threshold),
            estimate: self.estimate.or(other.estimate),
        }
    }

    fn settings(&self) -> Result<SolverSettings, CliError> {
        let mut s = SolverSettings::default();
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.a0 {
            s.a0 = v;
        }
        s.b0 = self.b0;
        if let Some(v) = self.k_samples {
            s.svb.k_samples = v;
        }
        if let Some(v) = self.iters {
            s.svb.max_iters = v;
        }
        if let Some(v) = self.lr_mu {
            s.svb.lr_mu = v;
        }
        if let Some(v) = self.lr_sigma {
            s.svb.lr_sigma = v;
        }
        if let Some(v) = self.lr_gamma {
            s.svb.lr_gamma = v;
        }
        if let Some(v) = self.grad_clip {
            s.svb.grad_clip = v;
        }
        if let Some(v) = self.tol {
            s.cavi.tol_entropy = v;
        }
        if let Some(v) = self.max_sweeps {
            s.cavi.max_sweeps = v;
        }
        if let Some(v) = self.gamma_threshold {
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::Input("gamma threshold must lie in (0, 1)".into()));
            }
            s.threshold = v;
        }
        if let Some(e) = self.estimate {
            s.estimate = e.into();
        }
        Ok(s)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    design: DesignArgs,
    /// Data seed for simulated input; the solver uses seed + 1000000.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory written by `simulate`.
    #[arg(long, conflicts_with_all = ["config", "n", "x"])]
    data: Option<PathBuf>,
    /// Design matrix CSV (header row).
    #[arg(long, requires = "y", conflicts_with_all = ["config", "n"])]
    x: Option<PathBuf>,
    /// Response CSV (header row, one column).
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// Held-out design for mspe.
    #[arg(long, requires_all = ["y_test", "theta"])]
    x_test: Option<PathBuf>,
    #[arg(long, requires = "x_test")]
    y_test: Option<PathBuf>,
    /// True coefficients, enabling metrics for CSV input.
    #[arg(long, requires = "x")]
    theta: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out rows (default: n).
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file with any of the flag values; flags given here take precedence.
    #[arg(long = "config-file")]
    config_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Single alpha (shorthand for a one-value grid).
    #[arg(long, conflicts_with = "alpha_grid")]
    alpha: Option<f64>,
    /// Comma-separated alphas.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    repeats: Option<usize>,
    /// Seed base: repeat r uses seed + r for data.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, env = "ALPHAVB_JOBS")]
    jobs: Option<usize>,
    /// Leave the wall-time column empty so output is reproducible byte for byte.
    #[arg(long)]
    no_wall_time: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// JSON mirror of the bench flags.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    method: Option<MethodArg>,
    config: Option<String>,
    n: Option<usize>,
    p: Option<usize>,
    s: Option<usize>,
    alpha_grid: Option<Vec<f64>>,
    repeats: Option<usize>,
    seed_base: Option<u64>,
    jobs: Option<usize>,
    output_path: Option<PathBuf>,
    no_wall_time: Option<bool>,
    #[serde(flatten)]
    solver: SolverArgs,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Diverged(String),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericOverflow | Error::DegenerateBatch | Error::InfeasibleObjective => {
                CliError::Diverged(format!("diverged: {e}"))
            }
            Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn resolve_design(d: &DesignArgs) -> Result<(String, usize, usize, usize), CliError> {
    if let Some(name) = &d.config {
        let c = simgen::predefined_config(name, 0)?;
        return Ok((name.clone(), d.n.unwrap_or(c.n), d.p.unwrap_or(c.p), d.s.unwrap_or(c.s)));
    }
    match (d.n, d.p, d.s) {
        (Some(n), Some(p), Some(s)) => Ok((format!("n{n}-p{p}-s{s}"), n, p, s)),
        _ => Err(CliError::Input("give --config or all of --n, --p, --s".into())),
    }
}

#[derive(Serialize)]
struct FitReport {
    method: String,
    alpha: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
    selected: Vec<usize>,
    metrics: Option<MetricBundle>,
    wall_time_ms: f64,
    converged: bool,
}

fn load_fit_input(args: &FitArgs) -> Result<(alphavb::DatasetView, Option<SimInstance>), CliError> {
    if let Some(dir) = &args.data {
        let inst = simgen::read_instance(dir)?;
        return Ok((inst.train.clone(), Some(inst)));
    }
    if let (Some(x), Some(y)) = (&args.x, &args.y) {
        let view = precompute(simgen::read_matrix(x)?, simgen::read_vector(y)?)?;
        let instance = match (&args.theta, &args.x_test, &args.y_test) {
            (Some(t), xt, yt) => {
                let theta_true = simgen::read_vector(t)?.to_vec();
                if theta_true.len() != view.p() {
                    return Err(CliError::Input(format!(
                        "shape: theta has length {} but X has {} columns",
                        theta_true.len(),
                        view.p()
                    )));
                }
                // without a held-out set, prediction error is measured in sample
                let test = match (xt, yt) {
                    (Some(xt), Some(yt)) => precompute(simgen::read_matrix(xt)?, simgen::read_vector(yt)?)?,
                    _ => view.clone(),
                };
                let support = (0..theta_true.len()).filter(|&i| theta_true[i] != 0.0).collect();
                Some(SimInstance {
                    train: view.clone(),
                    test,
                    theta_true,
                    support,
                })
            }
            _ => None,
        };
        return Ok((view, instance));
    }
    let (_, n, p, s) = resolve_design(&args.design)?;
    let inst = simgen::generate(&SimConfig::new(n, p, s, args.seed))?;
    Ok((inst.train.clone(), Some(inst)))
}

fn default_alpha(method: Method) -> f64 {
    match method {
        Method::Alphavb => 1.01,
        Method::Alphasvb => 0.9,
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let method: Method = args.method.into();
    let alpha = args.alpha.unwrap_or_else(|| default_alpha(method));
    if method == Method::Alphavb && !(alpha > 1.0) {
        return Err(Error::CaviAlpha.into());
    }
    let settings = args.solver.settings()?;
    let (view, instance) = load_fit_input(&args)?;
    let out = bench::fit(
        method,
        alpha,
        &view,
        &settings,
        args.seed.wrapping_add(SOLVER_SEED_OFFSET),
    )?;
    if out.diverged {
        return Err(CliError::Diverged("diverged".into()));
    }
    let metrics = match &instance {
        Some(inst) => Some(metrics::evaluate_with(
            &out.params,
            inst,
            settings.estimate,
            settings.threshold,
        )?),
        None => None,
    };
    let report = FitReport {
        method: method.to_string(),
        alpha,
        selected: metrics::select(&out.params, settings.threshold),
        mu: out.params.mu,
        sigma: out.params.sigma,
        gamma: out.params.gamma,
        metrics,
        wall_time_ms: out.wall_ms,
        converged: out.converged,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    match &args.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => writeln!(io::stdout(), "{text}")?,
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (_, n, p, s) = resolve_design(&args.design)?;
    let mut cfg = SimConfig::new(n, p, s, args.seed);
    if let Some(t) = args.test_n {
        cfg.test_n = t;
    }
    let inst = simgen::generate(&cfg)?;
    simgen::write_instance(&inst, &args.out)?;
    Ok(())
}

fn read_bench_file(path: &Path) -> Result<BenchFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_bench(args: BenchArgs, with_plot_data: bool) -> Result<(), CliError> {
    let file = match &args.config_file {
        Some(p) => read_bench_file(p)?,
        None => BenchFile::default(),
    };
    let method: Method = args
        .method
        .or(file.method)
        .ok_or_else(|| CliError::Input("--method is required".into()))?
        .into();
    let design = DesignArgs {
        config: args.design.config.clone().or(file.config.clone()),
        n: args.design.n.or(file.n),
        p: args.design.p.or(file.p),
        s: args.design.s.or(file.s),
    };
    let (label, n, p, s) = resolve_design(&design)?;
    let alpha_grid = args
        .alpha
        .map(|a| vec![a])
        .or(args.alpha_grid.clone())
        .or(file.alpha_grid.clone())
        .unwrap_or_else(|| vec![default_alpha(method)]);
    let jobs = args
        .jobs
        .or(file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let out = args
        .out
        .clone()
        .or(file.output_path.clone())
        .ok_or_else(|| CliError::Input("--out is required".into()))?;
    let solver = args.solver.clone().or(file.solver);
    let spec = BenchSpec {
        method,
        config: label,
        n,
        p,
        s,
        alpha_grid,
        repeats: args.repeats.or(file.repeats).unwrap_or(100),
        seed_base: args.seed.or(file.seed_base).unwrap_or(0),
        jobs,
        settings: solver.settings()?,
        record_wall_time: !(args.no_wall_time || file.no_wall_time.unwrap_or(false)),
    };
    let agg = bench::run_and_write(&spec, &out, with_plot_data)?;
    let mut stdout = io::stdout().lock();
    for r in agg.iter() {
        writeln!(
            stdout,
            "{} alpha={} {} {}: {:.4} ± {:.4} ({} repeats, {} failed)",
            r.method, r.alpha, r.config, r.metric, r.mean, r.sd, r.repeats, r.failed
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a, false),
        Command::SweepAlpha(a) => cmd_bench(a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) | Err(CliError::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Diverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
