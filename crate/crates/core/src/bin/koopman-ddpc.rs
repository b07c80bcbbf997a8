use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_ddpc::experiment::{cmd_collect, cmd_sweep, cmd_track, cmd_verify, ExperimentConfig, RunOptions};
use koopman_ddpc::{Error, Result};

/// Online tracking experiments on Koopman-linearizable systems.
///
/// Exit codes: 0 success, 1 config error, 2 numerical failure, 3 diagnostic failure.
#[derive(Parser)]
#[command(name = "koopman-ddpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embedding, excitation and Riccati diagnostics.
    Verify(Common),
    /// Collect and persist excitation data.
    Collect(Common),
    /// Closed-loop runs with per-step tables and regret reports.
    Track(Common),
    /// Regret against the prediction window, with log-linear fits.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to the config's output_dir, then
    /// $KOOPMAN_DDPC_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the data seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn prepare(args: &Common) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        match cfg.data.as_mut() {
            Some(d) => d.seed = seed,
            None => return Err(Error::Config("--seed given but the config has no data section".into())),
        }
    }
    if args.jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("KOOPMAN_DDPC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, RunOptions { out_dir, jobs: args.jobs }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (args, run): (&Common, fn(&ExperimentConfig, &RunOptions) -> Result<_>) = match &cli.command {
        Command::Verify(a) => (a, cmd_verify),
        Command::Collect(a) => (a, cmd_collect),
        Command::Track(a) => (a, cmd_track),
        Command::Sweep(a) => (a, cmd_sweep),
    };
    match prepare(args).and_then(|(cfg, opts)| run(&cfg, &opts)) {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
