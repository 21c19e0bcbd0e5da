use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppdmpc::batch::{run_batch, RunFile};
use ppdmpc::sim::ControllerKind;

#[derive(Parser)]
#[command(name = "ppdmpc", version, about = "Coupled prediction and planning for a tractor-trailer lane change")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a controller x sigma x scenario batch.
    Run(RunArgs),
    /// Print the default configuration file.
    Config,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Controllers to run (dc-mpc, pp-dmpc).
    #[arg(long, value_delimiter = ',')]
    controllers: Option<Vec<ControllerKind>>,
    /// Predictor noise levels.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Output directory; must be empty or absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(short, long)]
    workers: Option<usize>,
}

fn run(args: RunArgs) -> ppdmpc::Result<()> {
    let mut file = match &args.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    let m = &mut file.run;
    if let Some(v) = args.controllers {
        m.controllers = v;
    }
    if let Some(v) = args.sigmas {
        m.sigmas = v;
    }
    if let Some(v) = args.scenarios {
        m.scenarios = v;
    }
    if let Some(v) = args.base_seed {
        m.base_seed = v;
    }
    if let Some(v) = args.output {
        m.output = v;
    }
    if let Some(v) = args.workers {
        m.workers = v;
    }
    let summary = run_batch(&file.run, &file.episode)?;
    for t in &summary.metrics {
        println!(
            "{:8} sigma {:<4} success {:5.1}% collision {:5.1}% cost {:6.1}% iterations {} convergence {}",
            t.controller.as_str(),
            t.sigma_a,
            t.success_rate,
            t.collision_rate,
            t.relative_cost,
            t.mean_iterations.map_or("-".into(), |v| format!("{v:.2}")),
            t.convergence_rate.map_or("-".into(), |v| format!("{v:.1}%")),
        );
    }
    if !summary.failures.is_empty() {
        eprintln!("{} episodes failed; see episodes.jsonl", summary.failures.len());
    }
    println!("wrote {}", file.run.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match cli.command {
        Command::Run(args) => run(args),
        Command::Config => RunFile::default().to_toml().map(|t| print!("{t}")),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
