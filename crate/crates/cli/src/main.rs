use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldthermo::scenario::{parse_config, run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "ldthermo", version, about = "Exact finite-n checks of large-deviation thermodynamics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-n rate-function estimates against the analytic rate.
    Rate(Common),
    /// Build, execute and serialize adiabatic plans.
    Protocol(Common),
    /// Direct-part report: trace distances, work and entropy bookkeeping.
    VerifyDirect(Common),
    /// Converse lower bound on the reachable trace distance.
    VerifyConverse(Common),
    /// Finite-bath maximal work and first-law decomposition.
    Isothermal(Common),
    /// Information-spectrum crossover bands.
    Infospec(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Scenario config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "LDTHERMO_OUT", default_value = "out")]
    out: PathBuf,
    /// Override the scenario's n grid (bath sizes M for isothermal).
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<u64>>,
    /// Seed for the trajectory sampler (protocol only).
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(command: Command, args: Common) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let ctx = |e: ldthermo::Error| format!("{}: {e}", args.config.display());
    let mut scenario = parse_config(&text).map_err(ctx)?;
    if let Some(grid) = args.n_grid {
        scenario = scenario.with_n_grid(grid).map_err(ctx)?;
    }
    let opts = RunOptions { out_dir: args.out, seed: args.seed };
    let outcome = run(&scenario, command, &opts).map_err(|e| format!("scenario {}: {e}", scenario.name))?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    for v in &outcome.violations {
        eprintln!("violation: {v}");
    }
    Ok(ExitCode::from(outcome.exit_code() as u8))
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
    let (command, args) = match cli.command {
        Cmd::Rate(a) => (Command::Rate, a),
        Cmd::Protocol(a) => (Command::Protocol, a),
        Cmd::VerifyDirect(a) => (Command::VerifyDirect, a),
        Cmd::VerifyConverse(a) => (Command::VerifyConverse, a),
        Cmd::Isothermal(a) => (Command::Isothermal, a),
        Cmd::Infospec(a) => (Command::Infospec, a),
    };
    match execute(command, args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
