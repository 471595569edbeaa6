use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmesh::eval::MetricsReport;
use fedmesh::experiment::{self, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "fedmesh", version, about = "Federated learning across isolated data domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Replace the config's seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Set a config key, e.g. `privacy.enabled=false` or `domains.0.clients=3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Output {
    /// Output directory; replaces the config's `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every round in one process.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Train the same model on the pooled client data.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Coordinate clients that connect over TCP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long, value_name = "ADDR:PORT")]
        listen: Option<String>,
    },
    /// Take part in a served run as one client.
    Join {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ADDR:PORT")]
        server: Option<String>,
        #[arg(long, value_name = "U32")]
        client_id: u32,
    },
    /// Check a config and its data without training.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, RunError> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(ExperimentConfig::load(&common.config, &overrides)?)
}

fn options(output: &Output) -> RunOptions {
    RunOptions { out: output.out.clone(), force: output.force }
}

fn print_table(label: &str, m: &MetricsReport) {
    println!("{:<10} {:>8} {:>10} {:>8} {:>8}", "", "ACC", "Precision", "Recall", "F1");
    println!(
        "{:<10} {:>8.4} {:>10.4} {:>8.4} {:>8.4}",
        label, m.accuracy, m.precision, m.recall, m.f1
    );
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Simulate { common, output } => {
            let s = experiment::simulate(&load(&common)?, &options(&output))?;
            print_table("federated", &s.final_metrics);
            println!("{} rounds written to {}", s.rounds, s.out_dir.display());
        }
        Command::Baseline { common, output } => {
            let s = experiment::baseline(&load(&common)?, &options(&output))?;
            print_table("pooled", &s.final_metrics);
            println!("{} rounds written to {}", s.rounds, s.out_dir.display());
        }
        Command::Serve { common, output, listen } => {
            let s = experiment::serve(&load(&common)?, &options(&output), listen.as_deref())?;
            print_table("federated", &s.final_metrics);
            println!("{} rounds written to {}", s.rounds, s.out_dir.display());
        }
        Command::Join { common, server, client_id } => {
            let o = experiment::join(&load(&common)?, server.as_deref(), client_id)?;
            println!(
                "client {client_id}: {} rounds completed, {} contributed",
                o.rounds_completed, o.rounds_participated
            );
        }
        Command::Validate { common } => {
            let cfg = load(&common)?;
            let v = experiment::validate(&cfg)?;
            println!("config hash {}", v.config_hash);
            println!("{} clients, {} parameters", v.clients, v.param_dim);
            for (name, train, test, shards) in &v.domains {
                println!("  {name}: {train} train, {test} test, shards {shards:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDMESH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
