//! `bdenv`: invariant measures, simulation and rate certificates from a TOML
//! configuration.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::output::{manifest, OutDir, Report};

const OUT_ENV: &str = "BDENV_OUT_DIR";
const THREADS_ENV: &str = "BDENV_THREADS";

#[derive(Parser)]
#[command(name = "bdenv", version, about = "Birth-death processes in interactive random environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (a manifest from an earlier run also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: `BDENV_THREADS`, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: `BDENV_OUT_DIR`, else `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Analytic invariant measure, Ξ and assumption checks.
    Invariant,
    /// Joint simulation: occupancy, optional trajectory, TV to the analytic law.
    Simulate,
    /// Convergence-rate certificates, coupling tails and decay curves.
    Rates,
    /// Balance and assumption checks only.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Invariant => "invariant",
            Command::Simulate => "simulate",
            Command::Rates => "rates",
            Command::Verify => "verify",
        }
    }
}

fn run(cli: Cli) -> Result<bool, (u8, String)> {
    let usage = |m: String| (2u8, m);
    let path = cli.config.ok_or_else(|| usage("--config PATH is required".into()))?;
    let source = std::fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&source).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = cli.seed {
        cfg.sim.seed = Some(s);
    }
    let seed = cfg.sim.seed.unwrap_or(0);
    if seed > i64::MAX as u64 {
        return Err(usage(format!("seed {seed} does not fit in a TOML integer")));
    }
    cfg.sim.seed = Some(seed);
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().map_err(|_| usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    cfg.output.dir = out_dir.display().to_string();

    let model = cfg.build_model().map_err(|e| usage(e.to_string()))?;
    let env = cfg.build_environment().map_err(|e| usage(e.to_string()))?;
    let mut out = OutDir::create(&out_dir).map_err(|e| (3, format!("{}: {e}", out_dir.display())))?;
    let mut report = Report::default();
    report.info("command", cli.command.name());
    report.info("seed", seed);
    let ctx = Context {
        cfg: &cfg,
        model,
        env,
        seed,
        out: &mut out,
        report: &mut report,
    };
    let result = match cli.command {
        Command::Invariant => commands::invariant(ctx),
        Command::Simulate => commands::simulate(ctx),
        Command::Rates => commands::rates(ctx),
        Command::Verify => commands::verify(ctx),
    };
    if let Err(e) = &result {
        report.check("run", false, e);
    }
    let io = |e: std::io::Error| (3u8, e.to_string());
    out.write_text("report.txt", &report.render()).map_err(io)?;
    let files = out.written.clone();
    let text = manifest(cli.command.name(), &cfg.to_toml(), seed, rayon::current_num_threads(), &files);
    out.write_text("manifest.toml", &text).map_err(io)?;
    print!("{}", report.render());
    match result {
        Ok(()) => Ok(report.passed()),
        Err(e) => Err((3, e.to_string())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
