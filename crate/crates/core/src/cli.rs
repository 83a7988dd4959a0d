//! Command-line front end shared by the `lmrate` binary and tests.
//!
//! Settings come from an optional JSON file (`--config`) overridden by flags.
//! Everything is validated before any computation starts, and output is
//! written only after the command has finished.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::channel::{build_channel, discretize, GridOptions, DEFAULT_HALF_WIDTH};
use crate::constellation::{Constellation, Scheme};
use crate::dual::{newton_oracle, NewtonConfig, DEFAULT_HESSIAN_CAP};
use crate::error::{Error, Result};
use crate::gmi::gmi;
use crate::problem::{nats_to_bits, DiscreteProblem};
use crate::sinkhorn::{fmt17, solve, Acceleration, LambdaStrategy, LogDomain, SolveReport, SolverConfig, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_MAX_ITERS: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lmrate", version, about = "LM rate of mismatched decoding for 2-D constellations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one instance and print a JSON summary.
    Solve(RunArgs),
    /// Per-iteration residual trace as CSV.
    Residuals(RunArgs),
    /// LM rate and GMI over the cartesian product of the parameter lists.
    Sweep(RunArgs),
    /// Scaling solver against the Newton reference over the grid list.
    Compare(RunArgs),
    /// GMI of one instance.
    Gmi(RunArgs),
    /// Write the discretized problem as JSON.
    DumpProblem(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Project,
    Root,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LogDomainArg {
    Off,
    Fallback,
    Always,
}

#[derive(Debug, Default, Clone, Args)]
pub struct RunArgs {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated schemes: qpsk, 16qam, 64qam, 256qam.
    #[arg(long, value_delimiter = ',')]
    pub modulation: Vec<String>,
    /// Second-axis gain η₂ (η₁ = 1); comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eta: Vec<String>,
    /// Rotation in radians, or expressions like `pi/18`; comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Vec<String>,
    #[arg(long = "snr-db", value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_db: Vec<String>,
    /// Output grid points per axis (N = n²); comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub lambda_strategy: Option<StrategyArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Semi-dual Newton polishing once residuals fall below 1e-3.
    #[arg(long)]
    pub accelerate: bool,
    #[arg(long, value_enum)]
    pub log_domain: Option<LogDomainArg>,
    /// Replace the computed threshold T.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report rates in nats instead of bits.
    #[arg(long)]
    pub nats: bool,
    #[arg(long)]
    pub with_gmi: bool,
    /// Zero all timing fields so repeated runs are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub hessian_cap: Option<usize>,
    /// Also write the discretized problem to this path.
    #[arg(long)]
    pub dump_problem: Option<PathBuf>,
    /// Load a discretized problem instead of building one.
    #[arg(long)]
    pub problem: Option<PathBuf>,
}

/// Solver settings as they appear in configs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub tol: f64,
    /// `None` picks root finding when the instance certifies a unique root.
    pub lambda_strategy: Option<LambdaStrategy>,
    pub tau: Option<f64>,
    pub accelerate: bool,
    pub log_domain: LogDomain,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            max_iters: d.max_iters,
            tol: d.tol,
            lambda_strategy: None,
            tau: None,
            accelerate: false,
            log_domain: d.log_domain,
        }
    }
}

impl SolverSettings {
    pub fn solver_config(&self, p: &DiscreteProblem) -> SolverConfig {
        let base = SolverConfig::for_problem(p);
        SolverConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            lambda_strategy: self.lambda_strategy.unwrap_or(base.lambda_strategy),
            tau: self.tau,
            lambda_init: base.lambda_init,
            log_domain: self.log_domain,
            acceleration: if self.accelerate {
                Acceleration::semidual()
            } else {
                Acceleration::Off
            },
        }
    }
}

/// Fully resolved run settings; echoed into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub modulation: Vec<Scheme>,
    pub eta: Vec<f64>,
    pub theta: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub n_side: Vec<usize>,
    pub half_width: f64,
    pub solver: SolverSettings,
    pub threshold: Option<f64>,
    pub trials: usize,
    pub workers: usize,
    pub nats: bool,
    pub with_gmi: bool,
    pub timing: bool,
    pub hessian_cap: usize,
    pub problem: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub dump_problem: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modulation: vec![Scheme::Qpsk],
            eta: vec![0.9],
            theta: vec![PI / 18.0],
            snr_db: vec![0.0],
            n_side: vec![50],
            half_width: DEFAULT_HALF_WIDTH,
            solver: SolverSettings::default(),
            threshold: None,
            trials: 1,
            workers: 1,
            nats: false,
            with_gmi: false,
            timing: true,
            hessian_cap: DEFAULT_HESSIAN_CAP,
            problem: None,
            out: None,
            dump_problem: None,
        }
    }
}

fn cfg_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

/// Parses `1.2`, `pi`, `π/18`, `2*pi/3`, `-pi/4`.
pub fn parse_angle(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(v);
    }
    let t = t.replace('π', "pi").replace(' ', "");
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.to_string()),
        None => (false, t),
    };
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a.to_string(), Some(b.to_string())),
        None => (t.clone(), None),
    };
    let coef = match num.as_str() {
        "pi" => 1.0,
        other => {
            let c = other
                .strip_suffix("*pi")
                .or_else(|| other.strip_suffix("pi"))
                .ok_or_else(|| format!("cannot parse angle `{s}`"))?;
            c.parse::<f64>().map_err(|_| format!("cannot parse angle `{s}`"))?
        }
    };
    let den = match den {
        Some(d) => d.parse::<f64>().map_err(|_| format!("cannot parse angle `{s}`"))?,
        None => 1.0,
    };
    if den == 0.0 {
        return Err(format!("angle `{s}` divides by zero"));
    }
    let v = coef * PI / den;
    Ok(if neg { -v } else { v })
}

fn one_or_many(v: &Value) -> Vec<&Value> {
    match v {
        Value::Array(a) => a.iter().collect(),
        other => vec![other],
    }
}

fn json_f64s(v: &Value, path: &str) -> Result<Vec<f64>> {
    one_or_many(v)
        .into_iter()
        .enumerate()
        .map(|(k, x)| x.as_f64().ok_or_else(|| cfg_err(&format!("{path}[{k}]"), format!("expected a number, got {x}"))))
        .collect()
}

fn json_angles(v: &Value, path: &str) -> Result<Vec<f64>> {
    one_or_many(v)
        .into_iter()
        .enumerate()
        .map(|(k, x)| match x {
            Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
            Value::String(s) => parse_angle(s).map_err(|e| cfg_err(&format!("{path}[{k}]"), e)),
            other => Err(cfg_err(&format!("{path}[{k}]"), format!("expected an angle, got {other}"))),
        })
        .collect()
}

fn json_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| cfg_err(path, format!("expected a nonnegative integer, got {v}")))
}

fn json_bool(v: &Value, path: &str) -> Result<bool> {
    v.as_bool().ok_or_else(|| cfg_err(path, format!("expected true or false, got {v}")))
}

fn json_opt_f64(v: &Value, path: &str) -> Result<Option<f64>> {
    if v.is_null() {
        return Ok(None);
    }
    v.as_f64()
        .map(Some)
        .ok_or_else(|| cfg_err(path, format!("expected a number or null, got {v}")))
}

fn parse_strategy(s: &str, path: &str) -> Result<Option<LambdaStrategy>> {
    match s {
        "project" | "gradient_projection" => Ok(Some(LambdaStrategy::GradientProjection)),
        "root" | "root_find" => Ok(Some(LambdaStrategy::RootFind)),
        "auto" => Ok(None),
        other => Err(cfg_err(path, format!("unknown strategy `{other}` (project, root, auto)"))),
    }
}

fn parse_log_domain(s: &str, path: &str) -> Result<LogDomain> {
    match s {
        "off" => Ok(LogDomain::Off),
        "fallback" => Ok(LogDomain::Fallback),
        "always" => Ok(LogDomain::Always),
        other => Err(cfg_err(path, format!("unknown log-domain mode `{other}`"))),
    }
}

fn parse_schemes(items: &[String], path: &str) -> Result<Vec<Scheme>> {
    items
        .iter()
        .enumerate()
        .map(|(k, s)| s.parse::<Scheme>().map_err(|e| cfg_err(&format!("{path}[{k}]"), e)))
        .collect()
}

fn parse_list<T: std::str::FromStr>(items: &[String], path: &str) -> Result<Vec<T>> {
    items
        .iter()
        .enumerate()
        .map(|(k, s)| {
            s.trim()
                .parse::<T>()
                .map_err(|_| cfg_err(&format!("{path}[{k}]"), format!("cannot parse `{s}`")))
        })
        .collect()
}

impl RunConfig {
    /// Applies a JSON settings document on top of the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| cfg_err("$", e.to_string()))?;
        let obj = root
            .as_object()
            .ok_or_else(|| cfg_err("$", "expected a JSON object"))?;
        let mut c = RunConfig::default();
        for (key, v) in obj {
            let path = key.as_str();
            match path {
                "modulation" => {
                    let names: Vec<String> = one_or_many(v)
                        .into_iter()
                        .enumerate()
                        .map(|(k, x)| {
                            x.as_str()
                                .map(str::to_string)
                                .ok_or_else(|| cfg_err(&format!("modulation[{k}]"), "expected a scheme name"))
                        })
                        .collect::<Result<_>>()?;
                    c.modulation = parse_schemes(&names, "modulation")?;
                }
                "eta" => c.eta = json_f64s(v, path)?,
                "theta" => c.theta = json_angles(v, path)?,
                "snr_db" => c.snr_db = json_f64s(v, path)?,
                "n_side" | "grid" => {
                    c.n_side = one_or_many(v)
                        .into_iter()
                        .enumerate()
                        .map(|(k, x)| json_usize(x, &format!("{path}[{k}]")))
                        .collect::<Result<_>>()?
                }
                "half_width" => {
                    c.half_width = v.as_f64().ok_or_else(|| cfg_err(path, "expected a number"))?;
                }
                "threshold" => c.threshold = json_opt_f64(v, path)?,
                "trials" => c.trials = json_usize(v, path)?,
                "workers" => c.workers = json_usize(v, path)?,
                "nats" => c.nats = json_bool(v, path)?,
                "with_gmi" => c.with_gmi = json_bool(v, path)?,
                "timing" => c.timing = json_bool(v, path)?,
                "hessian_cap" => c.hessian_cap = json_usize(v, path)?,
                "out" => c.out = v.as_str().map(PathBuf::from),
                "problem" => c.problem = v.as_str().map(PathBuf::from),
                "solver" => {
                    let so = v
                        .as_object()
                        .ok_or_else(|| cfg_err("solver", "expected an object"))?;
                    for (sk, sv) in so {
                        let sp = format!("solver.{sk}");
                        match sk.as_str() {
                            "max_iters" => c.solver.max_iters = json_usize(sv, &sp)?,
                            "tol" => c.solver.tol = sv.as_f64().ok_or_else(|| cfg_err(&sp, "expected a number"))?,
                            "tau" => c.solver.tau = json_opt_f64(sv, &sp)?,
                            "accelerate" => c.solver.accelerate = json_bool(sv, &sp)?,
                            "lambda_strategy" => {
                                c.solver.lambda_strategy = match sv {
                                    Value::Null => None,
                                    Value::String(s) => parse_strategy(s, &sp)?,
                                    other => return Err(cfg_err(&sp, format!("expected a string, got {other}"))),
                                }
                            }
                            "log_domain" => {
                                let s = sv.as_str().ok_or_else(|| cfg_err(&sp, "expected a string"))?;
                                c.solver.log_domain = parse_log_domain(s, &sp)?;
                            }
                            _ => return Err(cfg_err(&sp, "unknown field")),
                        }
                    }
                }
                _ => return Err(cfg_err(path, "unknown field")),
            }
        }
        Ok(c)
    }

    /// Defaults, then `--config`, then flags.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut c = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
                RunConfig::from_json_str(&text).map_err(|e| match e {
                    Error::Config { path: p, reason } => cfg_err(&format!("{}:{p}", path.display()), reason),
                    other => other,
                })?
            }
            None => RunConfig::default(),
        };
        if !args.modulation.is_empty() {
            c.modulation = parse_schemes(&args.modulation, "--modulation")?;
        }
        if !args.eta.is_empty() {
            c.eta = parse_list(&args.eta, "--eta")?;
        }
        if !args.theta.is_empty() {
            c.theta = args
                .theta
                .iter()
                .enumerate()
                .map(|(k, s)| parse_angle(s).map_err(|e| cfg_err(&format!("--theta[{k}]"), e)))
                .collect::<Result<_>>()?;
        }
        if !args.snr_db.is_empty() {
            c.snr_db = parse_list(&args.snr_db, "--snr-db")?;
        }
        if !args.grid.is_empty() {
            c.n_side = parse_list(&args.grid, "--grid")?;
        }
        if let Some(v) = args.tol {
            c.solver.tol = v;
        }
        if let Some(v) = args.max_iters {
            c.solver.max_iters = v;
        }
        if let Some(s) = args.lambda_strategy {
            c.solver.lambda_strategy = Some(match s {
                StrategyArg::Project => LambdaStrategy::GradientProjection,
                StrategyArg::Root => LambdaStrategy::RootFind,
            });
        }
        if args.tau.is_some() {
            c.solver.tau = args.tau;
        }
        if args.accelerate {
            c.solver.accelerate = true;
        }
        if let Some(l) = args.log_domain {
            c.solver.log_domain = match l {
                LogDomainArg::Off => LogDomain::Off,
                LogDomainArg::Fallback => LogDomain::Fallback,
                LogDomainArg::Always => LogDomain::Always,
            };
        }
        if args.threshold.is_some() {
            c.threshold = args.threshold;
        }
        if let Some(v) = args.trials {
            c.trials = v;
        }
        if let Some(v) = args.workers {
            c.workers = v;
        }
        if args.out.is_some() {
            c.out = args.out.clone();
        }
        c.nats |= args.nats;
        c.with_gmi |= args.with_gmi;
        if args.no_timing {
            c.timing = false;
        }
        if let Some(v) = args.hessian_cap {
            c.hessian_cap = v;
        }
        if args.dump_problem.is_some() {
            c.dump_problem = args.dump_problem.clone();
        }
        if args.problem.is_some() {
            c.problem = args.problem.clone();
        }
        c.validate()?;
        Ok(c)
    }

    /// Field-level checks, including building every channel in the product.
    pub fn validate(&self) -> Result<()> {
        let nonempty = |len: usize, path: &str| {
            if len == 0 {
                Err(cfg_err(path, "list must not be empty"))
            } else {
                Ok(())
            }
        };
        nonempty(self.modulation.len(), "modulation")?;
        nonempty(self.eta.len(), "eta")?;
        nonempty(self.theta.len(), "theta")?;
        nonempty(self.snr_db.len(), "snr_db")?;
        nonempty(self.n_side.len(), "n_side")?;
        for (k, &n) in self.n_side.iter().enumerate() {
            if n < 2 {
                return Err(cfg_err(&format!("n_side[{k}]"), "must be at least 2"));
            }
        }
        for (k, &t) in self.theta.iter().enumerate() {
            if !t.is_finite() {
                return Err(cfg_err(&format!("theta[{k}]"), "must be finite"));
            }
        }
        for (ke, &eta) in self.eta.iter().enumerate() {
            for (ks, &snr) in self.snr_db.iter().enumerate() {
                build_channel(1.0, eta, self.theta[0], snr).map_err(|e| match e {
                    Error::InvalidChannel { field, reason } => {
                        let path = match field {
                            "snr_db" => format!("snr_db[{ks}]"),
                            _ => format!("eta[{ke}]"),
                        };
                        cfg_err(&path, reason)
                    }
                    other => other,
                })?;
            }
        }
        if !(self.half_width > 0.0) || !self.half_width.is_finite() {
            return Err(cfg_err("half_width", "must be positive"));
        }
        let s = &self.solver;
        if s.max_iters < 1 {
            return Err(cfg_err("solver.max_iters", "must be at least 1"));
        }
        if !(s.tol > 0.0) {
            return Err(cfg_err("solver.tol", "must be positive"));
        }
        if let Some(t) = s.tau {
            if !(t > 0.0) || !t.is_finite() {
                return Err(cfg_err("solver.tau", "must be positive"));
            }
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(cfg_err("threshold", "must be a nonnegative number"));
            }
        }
        if self.trials < 1 {
            return Err(cfg_err("trials", "must be at least 1"));
        }
        if self.workers < 1 {
            return Err(cfg_err("workers", "must be at least 1"));
        }
        if self.hessian_cap < 3 {
            return Err(cfg_err("hessian_cap", "must be at least 3"));
        }
        Ok(())
    }

    fn single(&self, what: &str) -> Result<()> {
        let lens = [
            ("modulation", self.modulation.len()),
            ("eta", self.eta.len()),
            ("theta", self.theta.len()),
            ("snr_db", self.snr_db.len()),
            ("n_side", self.n_side.len()),
        ];
        for (name, len) in lens {
            if len != 1 {
                return Err(cfg_err(name, format!("`{what}` takes a single value, got {len}")));
            }
        }
        Ok(())
    }

    fn rate(&self, nats: f64) -> f64 {
        if self.nats {
            nats
        } else {
            nats_to_bits(nats)
        }
    }

    fn unit(&self) -> &'static str {
        if self.nats {
            "nats"
        } else {
            "bits"
        }
    }

    fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn echo_line(&self) -> String {
        format!("# config: {}\n", serde_json::to_string(&self.echo()).expect("config serializes"))
    }
}

/// One point of the parameter product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub modulation: Scheme,
    pub eta: f64,
    pub theta: f64,
    pub snr_db: f64,
    pub n_side: usize,
}

pub fn build_problem(cell: &Cell, cfg: &RunConfig) -> Result<DiscreteProblem> {
    let c = Constellation::build(cell.modulation);
    let ch = build_channel(1.0, cell.eta, cell.theta, cell.snr_db)?;
    let opts = GridOptions {
        half_width: cfg.half_width,
        ..GridOptions::new(cell.n_side)
    };
    let (_, p) = discretize(&ch, &c, opts)?;
    match cfg.threshold {
        Some(t) => p.with_threshold(t),
        None => Ok(p),
    }
}

fn single_problem(cfg: &RunConfig) -> Result<(Cell, DiscreteProblem)> {
    let cell = Cell {
        modulation: cfg.modulation[0],
        eta: cfg.eta[0],
        theta: cfg.theta[0],
        snr_db: cfg.snr_db[0],
        n_side: cfg.n_side[0],
    };
    let p = match &cfg.problem {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
            let p = DiscreteProblem::from_json(&text)?;
            match cfg.threshold {
                Some(t) => p.with_threshold(t)?,
                None => p,
            }
        }
        None => build_problem(&cell, cfg)?,
    };
    if let Some(path) = &cfg.dump_problem {
        write_file(path, &p.to_json()?)?;
    }
    Ok((cell, p))
}

pub fn status_code(s: Status) -> i32 {
    match s {
        Status::Converged => EXIT_OK,
        Status::MaxIters => EXIT_MAX_ITERS,
        Status::NumericalFailure => EXIT_NUMERICAL,
    }
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Converged => "converged",
        Status::MaxIters => "max_iters",
        Status::NumericalFailure => "numerical_failure",
    }
}

/// Text produced by a command together with its exit code.
#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub text: String,
    pub code: i32,
}

fn ms(t: Instant, cfg: &RunConfig) -> f64 {
    if cfg.timing {
        t.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<Output> {
    cfg.single("solve")?;
    let (cell, p) = single_problem(cfg)?;
    let t0 = Instant::now();
    let rep = solve(&p, &cfg.solver.solver_config(&p))?;
    let runtime = ms(t0, cfg);
    let mut out = BTreeMap::new();
    out.insert("config", cfg.echo());
    out.insert("modulation", json!(cell.modulation.name()));
    out.insert("eta", json!(cell.eta));
    out.insert("theta", json!(cell.theta));
    out.insert("snr_db", json!(cell.snr_db));
    out.insert("n", json!(p.n()));
    out.insert("iterations", json!(rep.iterations));
    out.insert("unit", json!(cfg.unit()));
    out.insert(
        if cfg.nats { "lm_rate_nats" } else { "lm_rate_bits" },
        json_num(cfg.rate(rep.lm_rate_nats)),
    );
    if cfg.with_gmi {
        let g = gmi(&p)?;
        out.insert(if cfg.nats { "gmi_nats" } else { "gmi_bits" }, json_num(cfg.rate(g.value_nats)));
    }
    out.insert("lambda", json_num(rep.lambda_final));
    let r = rep.final_residuals();
    out.insert(
        "final_residuals",
        json!({"r_phi": json_num(r.r_phi), "r_psi": json_num(r.r_psi), "r_lambda": json_num(r.r_lambda)}),
    );
    out.insert("status", json!(status_name(rep.status)));
    if let Some((it, reason)) = &rep.failure {
        out.insert("failure", json!({"iteration": it, "reason": reason}));
    }
    out.insert("runtime_ms", json!(runtime));
    let text = serde_json::to_string_pretty(&out)? + "\n";
    Ok(Output {
        text,
        code: status_code(rep.status),
    })
}

/// JSON has no NaN; non-finite values become `null`.
fn json_num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn cmd_residuals(cfg: &RunConfig) -> Result<Output> {
    cfg.single("residuals")?;
    let (_, p) = single_problem(cfg)?;
    let rep = solve(&p, &cfg.solver.solver_config(&p))?;
    Ok(Output {
        text: cfg.echo_line() + &rep.trace_csv(),
        code: status_code(rep.status),
    })
}

pub fn cmd_gmi(cfg: &RunConfig) -> Result<Output> {
    cfg.single("gmi")?;
    let (cell, p) = single_problem(cfg)?;
    let g = gmi(&p)?;
    let mut out = BTreeMap::new();
    out.insert("config", cfg.echo());
    out.insert("modulation", json!(cell.modulation.name()));
    out.insert("n", json!(p.n()));
    out.insert(if cfg.nats { "gmi_nats" } else { "gmi_bits" }, json_num(cfg.rate(g.value_nats)));
    out.insert("s_star", json_num(g.s_star));
    out.insert("evaluations", json!(g.evaluations));
    Ok(Output {
        text: serde_json::to_string_pretty(&out)? + "\n",
        code: EXIT_OK,
    })
}

pub fn cmd_dump_problem(cfg: &RunConfig) -> Result<Output> {
    cfg.single("dump-problem")?;
    let (_, p) = single_problem(cfg)?;
    Ok(Output {
        text: p.to_json()? + "\n",
        code: EXIT_OK,
    })
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub cell: Cell,
    pub lm_rate_nats: f64,
    pub gmi_nats: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub status: i32,
    pub note: String,
}

fn sweep_cell(cell: Cell, cfg: &RunConfig) -> SweepRow {
    let run = || -> Result<(SolveReport, f64)> {
        let p = build_problem(&cell, cfg)?;
        let rep = solve(&p, &cfg.solver.solver_config(&p))?;
        let g = gmi(&p)?;
        Ok((rep, g.value_nats))
    };
    match run() {
        Ok((rep, g)) => SweepRow {
            cell,
            lm_rate_nats: rep.lm_rate_nats,
            gmi_nats: g,
            lambda: rep.lambda_final,
            iterations: rep.iterations,
            status: status_code(rep.status),
            note: rep.failure.map(|(_, r)| r).unwrap_or_default(),
        },
        Err(e) => SweepRow {
            cell,
            lm_rate_nats: f64::NAN,
            gmi_nats: f64::NAN,
            lambda: f64::NAN,
            iterations: 0,
            status: match e {
                Error::NumericalFailure { .. } => EXIT_NUMERICAL,
                _ => EXIT_INVALID,
            },
            note: e.to_string(),
        },
    }
}

fn scheme_rank(s: Scheme) -> usize {
    Scheme::ALL.iter().position(|&x| x == s).unwrap_or(usize::MAX)
}

fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &modulation in &cfg.modulation {
        for &eta in &cfg.eta {
            for &theta in &cfg.theta {
                for &snr_db in &cfg.snr_db {
                    for &n_side in &cfg.n_side {
                        out.push(Cell {
                            modulation,
                            eta,
                            theta,
                            snr_db,
                            n_side,
                        });
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| {
        scheme_rank(a.modulation)
            .cmp(&scheme_rank(b.modulation))
            .then(a.eta.total_cmp(&b.eta))
            .then(a.theta.total_cmp(&b.theta))
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then(a.n_side.cmp(&b.n_side))
    });
    out.dedup();
    out
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| cfg_err("workers", e.to_string()))
}

/// Runs every cell of the product; rows come back in sorted order.
pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let cells = cells(cfg);
    let rows = pool(cfg.workers)?.install(|| cells.par_iter().map(|&c| sweep_cell(c, cfg)).collect());
    Ok(rows)
}

fn csv_num(x: f64) -> String {
    if x.is_finite() {
        fmt17(x)
    } else {
        "nan".into()
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Output> {
    let rows = sweep_rows(cfg)?;
    let u = cfg.unit();
    let mut s = cfg.echo_line();
    s.push_str(&format!(
        "modulation,eta,theta,snr_db,n,lm_rate_{u},gmi_{u},lambda,iterations,status,note\n"
    ));
    let mut code = EXIT_OK;
    for r in &rows {
        code = code.max(r.status);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.modulation.name(),
            fmt17(r.cell.eta),
            fmt17(r.cell.theta),
            fmt17(r.cell.snr_db),
            r.cell.n_side * r.cell.n_side,
            csv_num(cfg.rate(r.lm_rate_nats)),
            csv_num(cfg.rate(r.gmi_nats)),
            csv_num(r.lambda),
            r.iterations,
            r.status,
            csv_text(&r.note),
        ));
    }
    Ok(Output { text: s, code })
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub scheme: Scheme,
    pub n: usize,
    pub t_sinkhorn_s: f64,
    /// `None` when the reference was skipped for size.
    pub t_oracle_s: Option<f64>,
    pub abs_diff_nats: Option<f64>,
    pub status: i32,
}

pub fn compare_rows(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    let ncfg = NewtonConfig {
        hessian_cap: cfg.hessian_cap,
        ..NewtonConfig::default()
    };
    for &scheme in &cfg.modulation {
        for &n_side in &cfg.n_side {
            let cell = Cell {
                modulation: scheme,
                eta: cfg.eta[0],
                theta: cfg.theta[0],
                snr_db: cfg.snr_db[0],
                n_side,
            };
            let p = build_problem(&cell, cfg)?;
            let scfg = cfg.solver.solver_config(&p);
            let mut ts = 0.0;
            let mut to = 0.0;
            let mut skipped = false;
            let mut diff = None;
            let mut status = EXIT_OK;
            for _ in 0..cfg.trials {
                let t0 = Instant::now();
                let rep = solve(&p, &scfg)?;
                ts += t0.elapsed().as_secs_f64();
                status = status.max(status_code(rep.status));
                let t1 = Instant::now();
                match newton_oracle(&p, &ncfg) {
                    Ok(o) => {
                        to += t1.elapsed().as_secs_f64();
                        status = status.max(status_code(o.status));
                        diff = Some((rep.lm_rate_nats - o.lm_rate_nats).abs());
                    }
                    Err(Error::UnsupportedSize { .. }) => skipped = true,
                    Err(e) => return Err(e),
                }
            }
            let k = cfg.trials as f64;
            let (ts, to) = if cfg.timing { (ts / k, to / k) } else { (0.0, 0.0) };
            rows.push(CompareRow {
                scheme,
                n: p.n(),
                t_sinkhorn_s: ts,
                t_oracle_s: (!skipped).then_some(to),
                abs_diff_nats: if skipped { None } else { diff },
                status,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<Output> {
    let rows = compare_rows(cfg)?;
    let mut s = cfg.echo_line();
    s.push_str("scheme,N,t_sinkhorn_s,t_oracle_s,speedup,abs_diff\n");
    let mut code = EXIT_OK;
    for r in &rows {
        code = code.max(r.status);
        let (to, speed, diff) = match (r.t_oracle_s, r.abs_diff_nats) {
            (Some(to), Some(d)) => {
                let speed = if r.t_sinkhorn_s > 0.0 { to / r.t_sinkhorn_s } else { 0.0 };
                (fmt17(to), fmt17(speed), fmt17(cfg.rate(d)))
            }
            _ => ("skipped".into(), "skipped".into(), "skipped".into()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scheme.name(),
            r.n,
            fmt17(r.t_sinkhorn_s),
            to,
            speed,
            diff
        ));
    }
    Ok(Output { text: s, code })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Runs a parsed command and returns the process exit code. Diagnostics go
/// to `err`; results go to `--out` or `out`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (args, f): (&RunArgs, fn(&RunConfig) -> Result<Output>) = match &cli.command {
        Command::Solve(a) => (a, cmd_solve),
        Command::Residuals(a) => (a, cmd_residuals),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Compare(a) => (a, cmd_compare),
        Command::Gmi(a) => (a, cmd_gmi),
        Command::DumpProblem(a) => (a, cmd_dump_problem),
    };
    let mut args = args.clone();
    if matches!(cli.command, Command::Compare(_)) && args.grid.is_empty() && args.config.is_none() {
        args.grid = vec!["10".into(), "15".into(), "20".into()];
    }
    let cfg = match RunConfig::resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INVALID;
        }
    };
    match f(&cfg) {
        Ok(o) => {
            let written = match &cfg.out {
                Some(path) => write_file(path, &o.text),
                None => out.write_all(o.text.as_bytes()).map_err(Error::from),
            };
            if let Err(e) = written {
                let _ = writeln!(err, "error: {e}");
                return EXIT_INVALID;
            }
            o.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::NumericalFailure { .. } => EXIT_NUMERICAL,
                _ => EXIT_INVALID,
            }
        }
    }
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(cli, &mut stdout.lock(), &mut stderr.lock())
}
