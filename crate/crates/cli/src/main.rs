//! `entdyn`: command-line front end for the entropic dynamics toolkit.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::Config;
use output::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "entdyn", version, about = "Entropic dynamics on exponential-family manifolds")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core), overriding the configuration.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "ENTDYN_OUT", default_value = "entdyn-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Metric, inverse, Christoffel symbols and entropy at points.
    Geometry,
    /// Kernel normalization and KS comparison of sampled steps.
    KernelCheck,
    /// Ensemble trajectories as CSV.
    Simulate {
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Extrapolated moment rates against their closed forms.
    Moments {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Recovered drift coefficient and its symmetry.
    Reciprocity {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fokker–Planck solve with snapshots and a refinement study.
    Fpe {
        #[arg(long, allow_hyphen_values = true)]
        t_end: Option<f64>,
    },
    /// Linearization about the fixed point and relaxation rate.
    Onsager,
    /// Acceptance suite with a pass/fail table.
    Verify {
        /// Reduced sample sizes (smoke run, not the stated tolerances).
        #[arg(long)]
        quick: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Geometry => "geometry",
            Command::KernelCheck => "kernel-check",
            Command::Simulate { .. } => "simulate",
            Command::Moments { .. } => "moments",
            Command::Reciprocity { .. } => "reciprocity",
            Command::Fpe { .. } => "fpe",
            Command::Onsager => "onsager",
            Command::Verify { .. } => "verify",
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid configuration ({} problem(s))", .0.len())]
    Config(Vec<String>),
    #[error("{} of {} acceptance criteria failed", .failed, .total)]
    ChecksFailed { failed: usize, total: usize },
    #[error(transparent)]
    Run(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::ChecksFailed { .. } => 3,
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    status: &'static str,
    kind: &'a str,
    message: String,
    details: Vec<String>,
}

fn report(err: &CliError) {
    let (kind, details) = match err {
        CliError::Config(v) => ("config", v.clone()),
        CliError::ChecksFailed { .. } => ("acceptance", vec![]),
        CliError::Run(e) => ("runtime", e.chain().skip(1).map(|c| c.to_string()).collect()),
    };
    let message = match err {
        CliError::Run(e) => e.to_string(),
        other => other.to_string(),
    };
    let r = ErrorReport {
        status: "error",
        kind,
        message,
        details,
    };
    eprintln!("{}", serde_json::to_string_pretty(&r).unwrap_or_else(|_| err.to_string()));
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Run)?;
    toml::from_str(&text).map_err(|e| CliError::Config(vec![e.message().to_string() + &location(&text, e.span())]))
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

fn apply_overrides(cfg: &mut Config, cli: &Cli) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::Simulate { trajectories, steps, tau } => {
            if let Some(v) = trajectories {
                cfg.simulate.trajectories = *v;
            }
            if let Some(v) = steps {
                cfg.simulate.steps = *v;
            }
            if let Some(v) = tau {
                cfg.simulate.tau = *v;
            }
        }
        Command::Moments { samples: Some(n) } => cfg.moments.samples_per_tau = *n,
        Command::Reciprocity { samples: Some(n) } => cfg.reciprocity.samples_per_tau = *n,
        Command::Fpe { t_end: Some(t) } => cfg.fpe.t_end = *t,
        Command::Verify { quick: true } => cfg.verify.quick = true,
        _ => {}
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, cli);
    cfg.validate().map_err(CliError::Config)?;
    // worker count does not change any output, so it stays out of the hash
    let resolved = serde_json::to_vec(&Config { workers: 0, ..cfg.clone() }).map_err(anyhow::Error::from)?;

    let mut failed = None;
    let outputs = entdyn::ensemble::with_workers(cfg.workers, || -> anyhow::Result<commands::Outputs> {
        Ok(match &cli.command {
            Command::Geometry => commands::geometry(&cfg)?,
            Command::KernelCheck => commands::kernel_check(&cfg)?,
            Command::Simulate { .. } => commands::simulate(&cfg)?,
            Command::Moments { .. } => commands::moments(&cfg)?,
            Command::Reciprocity { .. } => commands::reciprocity(&cfg)?,
            Command::Fpe { .. } => commands::fpe(&cfg)?,
            Command::Onsager => commands::onsager(&cfg)?,
            Command::Verify { .. } => {
                let (out, reports) = commands::verify(&cfg)?;
                print_table(&reports);
                let n = reports.iter().filter(|r| !(r.passed && r.within_time())).count();
                if n > 0 {
                    failed = Some((n, reports.len()));
                }
                out
            }
        })
    })?;

    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.name().into(),
        schema_version: cfg.schema_version,
        config_sha256: output::sha256_hex(&resolved),
        root_seed: cfg.seed,
        workers: cfg.workers,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        outputs: Vec::new(),
    };
    let path = output::commit(&cli.out, &outputs, manifest)?;
    for (name, _) in &outputs {
        println!("wrote {}", cli.out.join(name).display());
    }
    println!("wrote {}", path.display());
    match failed {
        Some((failed, total)) => Err(CliError::ChecksFailed { failed, total }),
        None => Ok(()),
    }
}

fn print_table(reports: &[entdyn::acceptance::CriterionReport]) {
    for r in reports {
        println!("{}", r.line());
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}
