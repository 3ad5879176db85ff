use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpsim::experiments::{self, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "tpsim", about = "Transport datapath simulator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, or `all`.
    Run(RunArgs),
    /// List registered experiments.
    List,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    experiment: String,
    /// TOML file with configuration sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `kv.queue_kb=24`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write SVG charts.
    #[arg(long)]
    plot: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write cycle traces.
    #[arg(long)]
    trace: bool,
    /// Run the end-to-end experiment at this queue size only.
    #[arg(long)]
    queue_kb: Option<u64>,
}

fn run(args: RunArgs) -> ExitCode {
    let text = match args.config.as_ref().map(std::fs::read_to_string).transpose() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read config: {e}");
            return ExitCode::from(1);
        }
    };
    let mut cfg = match RunConfig::load(text.as_deref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(q) = args.queue_kb {
        cfg.e2e.queues_kb = vec![q];
    }
    let opts = RunOptions {
        plot: args.plot,
        trace: args.trace,
    };
    let outcome = match experiments::run(&args.experiment, &cfg, opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return ExitCode::from(1);
    }
    for a in &outcome.artifacts {
        let path = args.out.join(&a.name);
        if let Err(e) = std::fs::write(&path, &a.contents) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(1);
        }
        println!("wrote {}", path.display());
    }
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &outcome.failures {
            eprintln!("invariant violated: {f}");
        }
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::List => {
            for n in experiments::EXPERIMENTS {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
    }
}
