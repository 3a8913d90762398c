use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsgsim_core::harness::{run_experiment, Experiment, ExperimentConfig, RunOptions};
use tsgsim_core::HarnessError;

#[derive(Parser)]
#[command(name = "tsgsim", version, about = "GPU timeslice-group and page-table grafting simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sequential vs pipelined data generation across the batch sweep.
    Datagen(Common),
    /// Sequential vs interleaved RL rollouts across the batch sweep.
    Rl(Common),
    /// Graft vs export/import cost as the number of shared buffers grows.
    Graftbench(Common),
    /// Utilization traces of one sequential and one pipelined run.
    Trace(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `run.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the full device event log as events.jsonl.
    #[arg(long)]
    json_events: bool,
    /// Also write page-table dumps as tables.json.
    #[arg(long)]
    dump_tables: bool,
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => 2,
        HarnessError::Invariant(_) | HarnessError::Workload(_) => 3,
        HarnessError::Io(_) | HarnessError::Csv(_) | HarnessError::Json(_) => 1,
    }
}

fn run(which: Experiment, args: &Common) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    let opts = RunOptions {
        json_events: args.json_events,
        dump_tables: args.dump_tables,
    };
    let out = run_experiment(which, &cfg, opts)?;
    out.write_to(&args.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (which, args) = match &cli.cmd {
        Cmd::Datagen(a) => (Experiment::Datagen, a),
        Cmd::Rl(a) => (Experiment::Rl, a),
        Cmd::Graftbench(a) => (Experiment::Graftbench, a),
        Cmd::Trace(a) => (Experiment::Trace, a),
    };
    match run(which, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
