//! `nerf-reloc`: dataset generation, shadow normalization, map training,
//! pose refinement, ablations, rendering and evaluation.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::*;

#[derive(Debug, Parser)]
#[command(name = "nerf-reloc", version, about = "Camera relocalization against a shadow-normalized radiance field")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "NERF_RELOC_THREADS")]
    pub threads: Option<usize>,
    /// Make outputs byte-reproducible (reports omit wall time).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from the analytic scene.
    Gen(GenArgs),
    /// Apply the shadow normalizer to every PNG in a directory.
    Normalize(NormalizeArgs),
    /// Fit a map to a dataset.
    Train(TrainArgs),
    /// Refine the pose of one test image.
    Localize(LocalizeArgs),
    /// Initial-error x toggle sweep.
    Ablate(AblateArgs),
    /// Render a map at a pose.
    Render(RenderArgs),
    /// Compare two images (and optionally two poses).
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let global = Global {
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match run(&global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(g: &Global, cmd: Command) -> nerf_reloc::Result<()> {
    match cmd {
        Command::Gen(a) => gen(g, a),
        Command::Normalize(a) => normalize(g, a),
        Command::Train(a) => train(g, a),
        Command::Localize(a) => localize(g, a),
        Command::Ablate(a) => ablate(g, a),
        Command::Render(a) => render(g, a),
        Command::Eval(a) => eval(g, a),
    }
}
