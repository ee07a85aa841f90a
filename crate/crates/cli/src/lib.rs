//! Command-line front end of `weak-spde`: each subcommand runs one
//! experiment from a JSON configuration and writes `<experiment>.csv`,
//! `summary.json` and `manifest.json` into the output directory.
//!
//! Exit codes: 0 when every assertion of the experiment holds, 1 when one
//! fails, 2 for configuration or usage errors (including preflight
//! violations under `--strict`), 3 when the computation itself errors.

pub mod config;
pub mod experiments;
pub mod output;
pub mod report;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::{load_config, preflight, Equation, RunConfig};
use experiments::{annotations_json, Experiment};
use output::{csv_bytes, json_bytes, sha256_hex, OutputDir};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "weak-spde", version, about = "Controllability rates, Kolmogorov fixed points and law comparisons for damped and heat SPDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; without one the heat defaults are used.
    #[arg(long, global = true, env = "WEAK_SPDE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "WEAK_SPDE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "WEAK_SPDE_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "WEAK_SPDE_THREADS")]
    pub threads: Option<usize>,
    /// Refuse to run when a parameter condition fails.
    #[arg(long, global = true, env = "WEAK_SPDE_STRICT")]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blow-up exponents of the Γ norms as t → 0.
    Rates,
    /// Explicit null controls: terminal residual and energy.
    Control,
    /// Trace-class probe of the weighted stochastic convolution.
    Trace,
    /// Quadrature derivative of the OU semigroup against finite differences.
    OuCheck,
    /// λ₀, contraction constants and the Picard iteration of V_λ.
    FixedPoint,
    /// Galerkin path simulation and moments.
    Simulate,
    /// Laplace functionals of two schemes compared within error budgets.
    Uniqueness,
    /// Mean-square gaps between Galerkin levels under shared noise.
    Cauchy,
    /// Measured-versus-predicted table from finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn experiment(&self) -> Option<Experiment> {
        Some(match self {
            Command::Rates => Experiment::Rates,
            Command::Control => Experiment::Control,
            Command::Trace => Experiment::Trace,
            Command::OuCheck => Experiment::OuCheck,
            Command::FixedPoint => Experiment::FixedPoint,
            Command::Simulate => Experiment::Simulate,
            Command::Uniqueness => Experiment::Uniqueness,
            Command::Cauchy => Experiment::Cauchy,
            Command::Report { .. } => return None,
        })
    }
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_CONFIG, error }
}

fn runtime_error(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_RUNTIME, error }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => {
            let mut v = serde_json::to_value(RunConfig::minimal(Equation::Heat))?;
            config::apply_env_overrides(&mut v, std::env::vars())?;
            RunConfig::from_value(v)?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs the parsed command; returns the exit code.
pub fn execute(cli: &Cli) -> std::result::Result<i32, Failure> {
    if let Some(n) = cli.threads {
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let started = chrono::Utc::now();
    let mut out = OutputDir::create(&cli.out).map_err(config_error)?;
    let (summary, pass, config_hash, seed) = match &cli.command {
        Command::Report { runs } => {
            let lines = report::collect(runs).map_err(config_error)?;
            let csv = csv_bytes("report", &report::rows(&lines)).map_err(runtime_error)?;
            out.write("report.csv", &csv).map_err(runtime_error)?;
            out.write("report.md", report::markdown(&lines).as_bytes()).map_err(runtime_error)?;
            let summary = report::summary(&lines);
            let pass = summary["pass"].as_bool().unwrap_or(false);
            (summary, pass, None, None)
        }
        command => {
            let experiment = command.experiment().expect("experiment command");
            let cfg = resolve_config(cli).map_err(config_error)?;
            let annotations = preflight(&cfg);
            for a in annotations.iter().filter(|a| !a.holds) {
                eprintln!("note: {} condition {} is {} ({} vs {})", a.name, a.condition, a.label(), a.lhs, a.rhs);
            }
            if cli.strict {
                if let Some(a) = annotations.iter().find(|a| !a.holds) {
                    return Err(config_error(anyhow::anyhow!("--strict: {} condition {} is {}", a.name, a.condition, a.label())));
                }
            }
            let config_json = serde_json::to_vec(&cfg).map_err(|e| runtime_error(e.into()))?;
            let hash = sha256_hex(&config_json);
            let outcome = experiments::run(experiment, &cfg)
                .with_context(|| format!("{} failed", experiment.name()))
                .map_err(runtime_error)?;
            let csv = csv_bytes(experiment.name(), &outcome.rows).map_err(runtime_error)?;
            out.write(&format!("{}.csv", experiment.name()), &csv).map_err(runtime_error)?;
            let summary = json!({
                "experiment": experiment.name(),
                "version": env!("CARGO_PKG_VERSION"),
                "seed": cfg.seed,
                "config_sha256": hash,
                "config": cfg,
                "preflight": annotations_json(&annotations),
                "pass": outcome.pass,
                "details": outcome.details,
            });
            (summary, outcome.pass, Some(hash), Some(cfg.seed))
        }
    };
    out.write("summary.json", &json_bytes(&summary).map_err(runtime_error)?).map_err(runtime_error)?;
    let manifest = json!({
        "tool": "weak-spde",
        "version": env!("CARGO_PKG_VERSION"),
        "command": summary["experiment"],
        "config_sha256": config_hash,
        "seed": seed,
        "threads": cli.threads.unwrap_or_else(rayon::current_num_threads),
        "started": started.to_rfc3339(),
        "finished": chrono::Utc::now().to_rfc3339(),
        "artifacts": out.artifacts(),
        "pass": pass,
    });
    output::write_atomic(&out.root().join("manifest.json"), &json_bytes(&manifest).map_err(runtime_error)?).map_err(runtime_error)?;
    println!("{}: {} ({})", summary["experiment"].as_str().unwrap_or("?"), if pass { "PASS" } else { "FAIL" }, out.root().display());
    Ok(if pass { EXIT_PASS } else { EXIT_FAIL })
}

/// Parses `args` and runs; the exit code of the whole program.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

/// The summary of a finished run directory.
pub fn read_summary(dir: &std::path::Path) -> Result<Value> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}
