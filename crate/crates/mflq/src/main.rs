use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mflq::error::CliError;
use mflq::manifest::RunManifest;
use mflq::pipeline::{
    describe, rerun, run_job, EnsembleFormat, Job, ModeArg, ModelSource, SimSettings, DEFAULT_SEED, PAPER_PATHS,
    PAPER_POPULATION, PAPER_STEPS,
};

/// Solver and simulator for mean-field LQG leader-follower games.
#[derive(Debug, Parser)]
#[command(name = "mflq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0: one per core); outputs do not depend on it
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Monte-Carlo paths
    #[arg(long, default_value_t = 200)]
    paths: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Euler steps [default: the solver grid]
    #[arg(long)]
    steps: Option<usize>,
    /// Store every k-th step [default: largest divisor of the steps up to 10]
    #[arg(long)]
    store_every: Option<usize>,
    /// Override the solver grid size of the model file
    #[arg(long)]
    grid: Option<usize>,
}

impl SimArgs {
    fn settings(&self) -> SimSettings {
        SimSettings { paths: self.paths, seed: self.seed, steps: self.steps, store_every: self.store_every }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Riccati systems and write them with an assumption report
    Solve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Override the solver grid size of the model file
        #[arg(long)]
        grid: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Solve, simulate a population and report costs
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Number of followers
        #[arg(long = "N")]
        population: usize,
        #[command(flatten)]
        sim: SimArgs,
        /// Ensemble export format
        #[arg(long, value_enum, default_value = "both")]
        ensemble: EnsembleFormat,
        /// Open loop: followers feed back the limit leader state instead of the realized one
        #[arg(long)]
        limit_leader: bool,
        /// Store every follower's trajectory
        #[arg(long)]
        keep_followers: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write the four reference figures (SVG) and their data (CSV)
    ReproducePaper {
        /// Number of followers
        #[arg(long = "N", default_value_t = PAPER_POPULATION)]
        population: usize,
        #[arg(long, default_value_t = PAPER_PATHS)]
        paths: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = PAPER_STEPS)]
        steps: usize,
        #[arg(long)]
        grid: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep population sizes and fit convergence rates
    Converge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Population sizes, comma separated (at least 3)
        #[arg(long = "N", value_delimiter = ',', default_value = "25,50,100,200,400")]
        populations: Vec<usize>,
        #[command(flatten)]
        sim: SimArgs,
        /// Also run the default epsilon probe family at every size
        #[arg(long)]
        probes: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a run from its manifest and verify the outputs byte for byte
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let (job, model, common) = match cli.command {
        Command::Solve { model, mode, grid, common } => {
            (Job::Solve { mode, grid_steps: grid }, ModelSource::read(&model)?, common)
        }
        Command::Simulate { model, mode, population, sim, ensemble, limit_leader, keep_followers, common } => (
            Job::Simulate {
                mode,
                population,
                sim: sim.settings(),
                grid_steps: sim.grid,
                ensemble,
                realized_leader: !limit_leader,
                keep_followers,
            },
            ModelSource::read(&model)?,
            common,
        ),
        Command::ReproducePaper { population, paths, seed, steps, grid, common } => (
            Job::ReproducePaper {
                population,
                sim: SimSettings { paths, seed, steps: Some(steps), store_every: None },
                grid_steps: grid,
            },
            ModelSource::bundled(),
            common,
        ),
        Command::Converge { model, mode, populations, sim, probes, common } => (
            Job::Converge { mode, populations, sim: sim.settings(), grid_steps: sim.grid, probes },
            ModelSource::read(&model)?,
            common,
        ),
        Command::Rerun { manifest, common } => {
            let text = std::fs::read_to_string(&manifest)
                .map_err(|e| CliError::io("rerun", format!("{}: {e}", manifest.display())))?;
            let m = RunManifest::from_json(&text)
                .map_err(|e| CliError::Parse { stage: "rerun", message: format!("{}: {e}", manifest.display()) })?;
            let fresh = rerun(&m, &common.out, common.threads)?;
            return Ok(format!("{}all outputs match {}\n", describe(&fresh, &common.out), manifest.display()));
        }
    };
    let manifest = run_job(&job, &model, &common.out, common.threads)?;
    Ok(describe(&manifest, &common.out))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
