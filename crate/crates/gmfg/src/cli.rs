//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, exit, Context, Failure, Figure, NashGapArgs, SimulateArgs};
use crate::config::{self, Loaded, MethodChoice};
use crate::exec::Rayon;
use crate::manifest::RunManifest;
use crate::presets;

pub const DEFAULT_OUTPUT_DIR: &str = "gmfg-output";

#[derive(Debug, Parser)]
#[command(name = "gmfg", version, about = "Risk-sensitive LQG graphon mean-field games")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "GMFG_OUTPUT_DIR", default_value = DEFAULT_OUTPUT_DIR)]
    pub out: PathBuf,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, conflicts_with = "config", default_value = "benchmark")]
    pub preset: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    FixedPoint,
    Spectral,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FigureArg {
    Riccati,
    State,
    Control,
    Z,
    S,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the configuration and report assumptions, contraction and spectrum.
    Check,
    /// Solve the mean-field system.
    Solve {
        /// Solver; defaults to the config choice, else spectral unless the map contracts.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Iterate the fixed point even when the map is not known to contract.
        #[arg(long)]
        force: bool,
    },
    /// Simulate the finite population under the decentralized strategies.
    Simulate {
        /// Number of agents.
        #[arg(long = "N")]
        agents: Option<usize>,
        /// Monte Carlo paths.
        #[arg(long = "M")]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// 1-based agents whose costs are estimated.
        #[arg(long, value_delimiter = ',')]
        probes: Option<Vec<usize>>,
        /// Skip trajectories.csv.
        #[arg(long)]
        no_trajectories: bool,
    },
    /// Estimate the Nash gap for a list of population sizes.
    NashGap {
        /// Comma-separated population sizes.
        #[arg(long = "N-list", value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        /// Monte Carlo paths per population size.
        #[arg(long = "M")]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Robustness parameter of a deviating middle agent.
        #[arg(long)]
        deviate: Option<f64>,
    },
    /// Regenerate figure data.
    Reproduce {
        #[arg(long, value_enum, default_value = "all")]
        figure: FigureArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load(cli: &Cli) -> Result<Loaded, Failure> {
    match &cli.config {
        Some(path) => Ok(config::load(path)?),
        None => {
            let c = presets::by_name(&cli.preset).ok_or_else(|| {
                Failure::new(
                    exit::CONFIG,
                    format!("unknown preset {:?}; available: {}", cli.preset, presets::NAMES.join(", ")),
                )
            })?;
            Ok(c.resolve(std::path::Path::new("."), &format!("preset:{}", cli.preset))?)
        }
    }
}

fn dispatch(ctx: &mut Context, command: &Command) -> Result<(), Failure> {
    match command {
        Command::Check => commands::check(ctx),
        Command::Solve { method, force } => {
            let method = method.map(|m| match m {
                MethodArg::FixedPoint => MethodChoice::FixedPoint,
                MethodArg::Spectral => MethodChoice::Spectral,
                MethodArg::Both => MethodChoice::Both,
            });
            commands::solve(ctx, method, *force)
        }
        Command::Simulate { agents, paths, seed, probes, no_trajectories } => commands::simulate(
            ctx,
            &SimulateArgs {
                agents: *agents,
                paths: *paths,
                seed: *seed,
                probes: probes.clone(),
                trajectories: !no_trajectories,
            },
        ),
        Command::NashGap { n_list, paths, seed, deviate } => commands::nash_gap(
            ctx,
            &NashGapArgs { n_list: n_list.clone(), paths: *paths, seed: *seed, deviate: *deviate },
        ),
        Command::Reproduce { figure, seed } => {
            let figure = match figure {
                FigureArg::Riccati => Figure::Riccati,
                FigureArg::State => Figure::State,
                FigureArg::Control => Figure::Control,
                FigureArg::Z => Figure::Z,
                FigureArg::S => Figure::S,
                FigureArg::All => Figure::All,
            };
            commands::reproduce(ctx, figure, *seed)
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let command: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let source = cli.config.as_ref().map_or_else(|| format!("preset:{}", cli.preset), |p| p.display().to_string());
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return exit::CONFIG;
    }
    let exec = match Rayon::new(cli.threads) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return exit::CONFIG;
        }
    };
    let mut manifest = RunManifest::new(command, source, String::new(), None, exec.threads(), &cli.out);
    let loaded = match load(&cli) {
        Ok(l) => l,
        Err(f) => {
            let _ = manifest.finish(Err(f.message.clone()));
            eprintln!("error: {f}");
            return f.code;
        }
    };
    manifest.spec_hash = loaded.hash.clone();
    if let Err(e) = manifest.write() {
        eprintln!("error: cannot write manifest: {e}");
        return exit::CONFIG;
    }
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let mut ctx = Context { loaded, exec, out: cli.out.clone(), manifest };
    let result = dispatch(&mut ctx, &cli.command);
    let code = match &result {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    };
    if let Err(e) = ctx.manifest.finish(result.map_err(|f| f.message)) {
        eprintln!("error: cannot write manifest: {e}");
        return exit::CONFIG;
    }
    code
}
