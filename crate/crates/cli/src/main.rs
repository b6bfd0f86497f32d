mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Experiment, SchemaError};

const EXIT_VERDICT: u8 = 2;
const EXIT_ERROR: u8 = 1;
const EXIT_SCHEMA: u8 = 3;

/// Reproducible experiments for controller-vs-stopper games.
#[derive(Parser)]
#[command(name = "gamelab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for path and sweep parallelism.
    #[arg(long, global = true, env = "GAMELAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate controlled paths and export them with their drivers.
    Simulate,
    /// Solve the penalized grid problem and write the value bundle.
    SolveVi,
    /// Coupling distance against gamma.
    SweepGamma,
    /// Mollified payoff convergence along a j-sweep.
    SweepMollify,
    /// Cauchy-difference value rate in gamma.
    StudyRate,
    /// Stopper plays theta* against a family of controls.
    StudyOptimality,
    /// Sampled checks of the standing assumptions.
    Validate,
    /// Merge verdict blocks in the output directory.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveVi => "solve-vi",
            Command::SweepGamma => "sweep-gamma",
            Command::SweepMollify => "sweep-mollify",
            Command::StudyRate => "study-rate",
            Command::StudyOptimality => "study-optimality",
            Command::Validate => "validate",
            Command::Report => "report",
        }
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<SchemaError>().is_some() {
        return EXIT_SCHEMA;
    }
    match err.downcast_ref::<gamelab_core::Error>() {
        Some(e) if e.is_config() => EXIT_SCHEMA,
        _ => EXIT_ERROR,
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if cli.command == Command::Report {
        let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let merged = artifacts::report(&dir)?;
        print!("{}", merged.summary());
        return Ok(merged.pass());
    }
    let Some(path) = &cli.config else {
        anyhow::bail!(SchemaError {
            file: PathBuf::from("<command line>"),
            message: format!("{} needs --config", cli.command.name()),
        });
    };
    let exp = Experiment::load(path, cli.seed)?;
    let out = cli.out.clone().or_else(|| exp.config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let run = commands::Run::new(&exp, &out);
    let block = match cli.command {
        Command::Simulate => commands::simulate(run),
        Command::SolveVi => commands::solve(run),
        Command::SweepGamma => commands::sweep_gamma(run),
        Command::SweepMollify => commands::sweep_mollify(run),
        Command::StudyRate => commands::study_rate(run),
        Command::StudyOptimality => commands::study_optimality(run),
        Command::Validate => commands::validate(run),
        Command::Report => unreachable!(),
    }?;
    for v in &block.verdicts {
        println!("{} {}: {}", if v.pass { "pass" } else { "FAIL" }, v.name, v.detail);
    }
    Ok(block.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERDICT),
        Err(e) => {
            eprintln!("gamelab {}: {e:#}", cli.command.name());
            ExitCode::from(exit_status(&e))
        }
    }
}
