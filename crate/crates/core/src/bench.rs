//! Repeated fits on simulated data, aggregation and CSV output.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavi::run_cavi;
use crate::error::{Error, Result};
use crate::metrics::{self, Estimate, MetricBundle, DEFAULT_THRESHOLD};
use crate::model_core::{DatasetView, PriorSpec, RenyiConfig, VariationalParams};
use crate::simgen::{generate, SimConfig};
use crate::svb::{run_svb, SvbConfig};

/// Offset between the data seed and the solver seed of a repeat.
pub const SOLVER_SEED_OFFSET: u64 = 1_000_000;

pub const METRIC_NAMES: [&str; 4] = ["l2", "fdr", "tpr", "mspe"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Alphavb,
    Alphasvb,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Alphavb => "alphavb",
            Method::Alphasvb => "alphasvb",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alphavb" => Ok(Method::Alphavb),
            "alphasvb" => Ok(Method::Alphasvb),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Prior and solver knobs shared by `fit` and `bench`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub lambda: f64,
    pub a0: f64,
    /// `None` means `p`.
    pub b0: Option<f64>,
    pub cavi: RenyiConfig,
    pub svb: SvbConfig,
    pub estimate: Estimate,
    pub threshold: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            a0: 1.0,
            b0: None,
            cavi: RenyiConfig::default(),
            svb: SvbConfig::default(),
            estimate: Estimate::Gm,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl SolverSettings {
    pub fn prior(&self, p: usize) -> Result<PriorSpec> {
        PriorSpec::new(self.lambda, self.a0, self.b0.unwrap_or(p as f64))
    }
}

/// Result of one solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: VariationalParams,
    /// CAVI: entropy criterion met; SVB: ran all iterations without diverging.
    pub converged: bool,
    pub diverged: bool,
    pub wall_ms: f64,
}

pub fn fit(
    method: Method,
    alpha: f64,
    view: &DatasetView,
    settings: &SolverSettings,
    solver_seed: u64,
) -> Result<FitOutcome> {
    let prior = settings.prior(view.p())?;
    let start = Instant::now();
    let (params, converged, diverged) = match method {
        Method::Alphavb => {
            let cfg = RenyiConfig { alpha, ..settings.cavi };
            let state = run_cavi(view, &prior, &cfg)?;
            (state.params, state.converged, false)
        }
        Method::Alphasvb => {
            let cfg = SvbConfig {
                alpha,
                seed: solver_seed,
                ..settings.svb
            };
            let out = run_svb(view, &prior, &cfg)?;
            (out.params, !out.diverged, out.diverged)
        }
    };
    Ok(FitOutcome {
        params,
        converged,
        diverged,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub method: Method,
    /// Label written to the `config` column.
    pub config: String,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub alpha_grid: Vec<f64>,
    pub repeats: usize,
    pub seed_base: u64,
    pub jobs: usize,
    pub settings: SolverSettings,
    /// When false the wall-time column is left empty, making output
    /// independent of timing.
    pub record_wall_time: bool,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidConfig("alpha values must be positive".into()));
        }
        if self.method == Method::Alphavb && self.alpha_grid.iter().any(|&a| a <= 1.0) {
            return Err(Error::CaviAlpha);
        }
        if self.method == Method::Alphasvb && self.alpha_grid.contains(&1.0) {
            return Err(Error::Domain("alphasvb requires alpha != 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        SimConfig::new(self.n, self.p, self.s, 0).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub method: Method,
    pub alpha: f64,
    pub config: String,
    pub repeat: usize,
    /// `None` for a failed repeat.
    pub metrics: Option<MetricBundle>,
    pub wall_ms: Option<f64>,
    pub status: &'static str,
}

fn run_repeat(spec: &BenchSpec, alpha: f64, r: usize) -> LongRow {
    let data_seed = spec.seed_base.wrapping_add(r as u64);
    let solver_seed = data_seed.wrapping_add(SOLVER_SEED_OFFSET);
    let result = generate(&SimConfig::new(spec.n, spec.p, spec.s, data_seed)).and_then(|inst| {
        let out = fit(spec.method, alpha, &inst.train, &spec.settings, solver_seed)?;
        if out.diverged {
            return Err(Error::NumericOverflow);
        }
        let m = metrics::evaluate_with(&out.params, &inst, spec.settings.estimate, spec.settings.threshold)?;
        Ok((m, out.wall_ms))
    });
    let (metrics, wall_ms, status) = match result {
        Ok((m, w)) => (Some(m), Some(w), "ok"),
        Err(_) => (None, None, "failed"),
    };
    LongRow {
        method: spec.method,
        alpha,
        config: spec.config.clone(),
        repeat: r,
        metrics,
        wall_ms: if spec.record_wall_time { wall_ms } else { None },
        status,
    }
}

/// Runs every `(alpha, repeat)` pair on a pool of `spec.jobs` threads.
/// Rows come back ordered by alpha (grid order) then repeat.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<LongRow>> {
    spec.validate()?;
    let tasks: Vec<(f64, usize)> = spec
        .alpha_grid
        .iter()
        .flat_map(|&a| (0..spec.repeats).map(move |r| (a, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| tasks.par_iter().map(|&(a, r)| run_repeat(spec, a, r)).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub alpha: f64,
    pub config: String,
    pub metric: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub repeats: usize,
    pub failed: usize,
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn metric_value(m: &MetricBundle, name: &str) -> f64 {
    match name {
        "l2" => m.l2,
        "fdr" => m.fdr,
        "tpr" => m.tpr,
        _ => m.mspe,
    }
}

/// One row per `(alpha, metric)`, in the order alphas first appear.
pub fn aggregate(rows: &[LongRow]) -> Vec<AggregateRow> {
    let mut alphas: Vec<f64> = Vec::new();
    for r in rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    let mut out = Vec::new();
    for a in alphas {
        let group: Vec<&LongRow> = rows.iter().filter(|r| r.alpha == a).collect();
        let ok: Vec<&MetricBundle> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = ok.iter().map(|m| metric_value(m, name)).collect();
            let (mean, sd) = mean_sd(&vals);
            out.push(AggregateRow {
                method: group[0].method,
                alpha: a,
                config: group[0].config.clone(),
                metric: name,
                mean,
                sd,
                repeats: group.len(),
                failed: group.len() - ok.len(),
            });
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_long_csv<W: Write>(rows: &[LongRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "method", "alpha", "config", "repeat", "l2", "fdr", "tpr", "mspe", "wall_ms", "status",
    ])?;
    for r in rows {
        let m = r.metrics;
        w.write_record([
            r.method.to_string(),
            r.alpha.to_string(),
            r.config.clone(),
            r.repeat.to_string(),
            opt(m.map(|m| m.l2)),
            opt(m.map(|m| m.fdr)),
            opt(m.map(|m| m.tpr)),
            opt(m.map(|m| m.mspe)),
            opt(r.wall_ms),
            r.status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["method", "alpha", "config", "metric", "mean", "sd", "repeats", "failed"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.alpha.to_string(),
            r.config.clone(),
            r.metric.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.repeats.to_string(),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace-separated table: alpha, then mean and sd of each metric.
pub fn write_gnuplot<W: Write>(rows: &[AggregateRow], mut w: W) -> Result<()> {
    write!(w, "# alpha")?;
    for name in METRIC_NAMES {
        write!(w, " {name}_mean {name}_sd")?;
    }
    writeln!(w)?;
    for chunk in rows.chunks(METRIC_NAMES.len()) {
        write!(w, "{}", chunk[0].alpha)?;
        for r in chunk {
            write!(w, " {} {}", r.mean, r.sd)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Output file names inside the bench directory.
pub const LONG_CSV: &str = "long.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const GNUPLOT_DAT: &str = "sweep.dat";

/// Runs the benchmark and writes `long.csv` and `aggregate.csv` (plus
/// `sweep.dat` when `with_plot_data`) into `dir`.
pub fn run_and_write(spec: &BenchSpec, dir: &Path, with_plot_data: bool) -> Result<Vec<AggregateRow>> {
    let rows = run_bench(spec)?;
    let agg = aggregate(&rows);
    fs::create_dir_all(dir)?;
    write_long_csv(&rows, fs::File::create(dir.join(LONG_CSV))?)?;
    write_aggregate_csv(&agg, fs::File::create(dir.join(AGGREGATE_CSV))?)?;
    if with_plot_data {
        write_gnuplot(&agg, fs::File::create(dir.join(GNUPLOT_DAT))?)?;
    }
    Ok(agg)
}
