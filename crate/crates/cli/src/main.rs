use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use twistor_cli::{default_config, parse_config, render_table, ExitStatus, Runner};
use twistor_core::fixtures::load_fixtures;

const DEFAULT_OUT: &str = "twistor-out";

/// Verify twistor, Killing and parallel forms on products of flat tori and
/// round 2-spheres.
#[derive(Parser, Debug)]
#[command(name = "twistor", version)]
struct Args {
    /// Run configuration (JSON); the built-in default matrix when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random test forms (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the scenarios and exit.
    #[arg(long)]
    list_scenarios: bool,
    /// Directory of oracle fixture JSON files.
    #[arg(long)]
    oracle_fixtures: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long)]
    max_threads: Option<usize>,
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status as u8)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return exit(ExitStatus::Config);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match &args.config {
        Some(path) => match parse_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return exit(ExitStatus::Config);
            }
        },
        None => default_config(),
    };
    let scenarios = match cfg.scenarios() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return exit(ExitStatus::Config);
        }
    };
    if args.list_scenarios {
        for sc in &scenarios {
            let suites: Vec<&str> = sc.suites.iter().map(|s| s.name()).collect();
            println!(
                "{}\t{}\tdegrees={:?}\tsuites={}",
                sc.name,
                sc.geometry.describe(),
                sc.degrees,
                suites.join(",")
            );
        }
        return ExitCode::SUCCESS;
    }
    if let Some(n) = args.max_threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return exit(ExitStatus::Config);
        }
    }
    let fixtures = match &args.oracle_fixtures {
        Some(dir) => match load_fixtures(dir) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: {e}");
                return exit(ExitStatus::Config);
            }
        },
        None => Vec::new(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let runner = Runner::new(&cfg, out, args.seed, fixtures);
    let outcome = runner.run(&scenarios, |row| {
        eprintln!("{:<18} {:<14} p={:<2} {}", row.suite, row.scenario, row.p, row.verdict);
    });
    match outcome {
        Ok(o) => {
            let _ = render_table(&o.rows, std::io::stdout().lock());
            exit(o.status)
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit(ExitStatus::Config)
        }
    }
}
