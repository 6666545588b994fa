//! Command-line front end: run scenarios, compare protocols, emit presets.
//!
//! Exit codes: 0 success, 1 usage error, 2 scenario load/validation error,
//! 3 internal invariant failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use meshsim::engine::{run_scenario_with, EngineError, RunOptions};
use meshsim::report::{compare, seed_range};
use meshsim::scenario::{preset, Protocol, Scenario, PRESET_NAMES};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "meshsim",
    version,
    about = "Wireless mesh forwarding simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.csv, series.csv and report.json
    Run(RunArgs),
    /// Run several protocols on the same scenario and seed set
    Compare(CompareArgs),
    /// Print (or write) a built-in scenario
    Preset(PresetArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario protocol (gsr or aal2r)
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Output directory
    #[arg(long, default_value = "meshsim-out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario TOML file
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated protocol list, e.g. gsr,aal2r
    #[arg(long, value_delimiter = ',')]
    protocols: Vec<Protocol>,
    /// Number of seeds (scenario seed, seed+1, ...)
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Output directory
    #[arg(long, default_value = "meshsim-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// One of: paper-10node, line-3, grid-9
    name: String,
    /// Write the scenario to a file instead of stdout
    #[arg(long)]
    emit: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not failures
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Preset(args) => cmd_preset(args),
    }
}

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn engine_exit(e: EngineError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        EngineError::Scenario(_) => ExitCode::from(EXIT_VALIDATION),
        EngineError::Invariant(_) => ExitCode::from(EXIT_INVARIANT),
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let scenario = match load(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let opts = RunOptions {
        protocol: args.protocol,
        seed: args.seed,
        record_tx_log: false,
    };
    let report = match run_scenario_with(&scenario, &opts) {
        Ok(out) => out.report,
        Err(e) => return engine_exit(e),
    };
    if let Err(e) = report.save(&args.out) {
        eprintln!("error: cannot write outputs to {}: {e}", args.out.display());
        return ExitCode::from(EXIT_USAGE);
    }
    println!(
        "run {} protocol {} seed {}",
        report.scenario_digest, report.protocol, report.seed
    );
    println!(
        "  sent {}  received {}  pdr {}  throughput {:.1} bit/s",
        report.totals.counters.sent,
        report.totals.counters.received,
        report
            .totals
            .pdr
            .map(|p| format!("{p:.6}"))
            .unwrap_or_else(|| "na".into()),
        report.totals.throughput_avg_bps,
    );
    println!(
        "  drops: queue {} noroute {} hopbudget {} linkloss {}  control bytes {}",
        report.totals.counters.dropped_queue,
        report.totals.counters.dropped_noroute,
        report.totals.counters.dropped_hopbudget,
        report.totals.counters.dropped_linkloss,
        report.totals.counters.control_bytes_sent,
    );
    println!("  outputs in {}", args.out.display());
    ExitCode::SUCCESS
}

fn cmd_compare(args: CompareArgs) -> ExitCode {
    if args.protocols.is_empty() {
        eprintln!("error: --protocols requires at least one protocol (gsr,aal2r)");
        return ExitCode::from(EXIT_USAGE);
    }
    if args.seeds == 0 {
        eprintln!("error: --seeds must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    let mut protocols = Vec::new();
    for &p in &args.protocols {
        if protocols.contains(&p) {
            eprintln!("warning: duplicate protocol {p} ignored");
        } else {
            protocols.push(p);
        }
    }
    let scenario = match load(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let seeds = seed_range(scenario.seed, args.seeds);
    let report = match compare(&scenario, &protocols, &seeds) {
        Ok(r) => r,
        Err(e) => return engine_exit(e),
    };
    print!("{}", report.text_summary());
    if let Err(e) = report.save(&args.out) {
        eprintln!("error: cannot write outputs to {}: {e}", args.out.display());
        return ExitCode::from(EXIT_USAGE);
    }
    println!("outputs in {}", args.out.display());
    ExitCode::SUCCESS
}

fn cmd_preset(args: PresetArgs) -> ExitCode {
    let scenario = match preset(&args.name) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e} (known presets: {})", PRESET_NAMES.join(", "));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let toml = scenario.to_toml();
    match args.emit {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, toml) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(EXIT_USAGE);
            }
            println!("wrote {}", path.display());
        }
        None => print!("{toml}"),
    }
    ExitCode::SUCCESS
}
