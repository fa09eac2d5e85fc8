// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgeguard::{export, run_scenario, MetricsSeries, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "edgeguard", version, about = "Cloud-assisted edge gateway simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv and analytics.jsonl.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Disable collaboration between segments.
        #[arg(long)]
        no_collab: bool,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Compare per-segment attack fractions of two metrics files.
    Compare { a: PathBuf, b: PathBuf },
}

const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_INVALID })
    })
}

fn run(scenario: PathBuf, out: PathBuf, no_collab: bool, seed: Option<u64>) -> Result<(), ExitCode> {
    let mut sc = load(&scenario)?;
    if no_collab || seed.is_some() {
        sc.spec.collaboration &= !no_collab;
        if let Some(seed) = seed {
            sc.spec.seed = seed;
        }
        sc = Scenario::from_spec(sc.spec).map_err(|e: ScenarioError| {
            eprintln!("{e}");
            ExitCode::from(EXIT_INVALID)
        })?;
    }
    let result = run_scenario(&sc).map_err(|e| {
        eprintln!("simulation failed: {e}");
        ExitCode::from(EXIT_INVALID)
    })?;
    let io = |e: std::io::Error| {
        eprintln!("cannot write to {}: {e}", out.display());
        ExitCode::from(EXIT_IO)
    };
    std::fs::create_dir_all(&out).map_err(io)?;
    result.metrics.write_csv(&out.join("metrics.csv")).map_err(io)?;
    std::fs::write(out.join("analytics.jsonl"), export::analytics_jsonl(&result)).map_err(io)?;
    println!("segment,attack_received,analyzed_fraction,dropped_fraction,css_requests");
    for (name, t) in result.metrics.totals() {
        println!(
            "{name},{},{:.4},{:.4},{}",
            t.attack_received,
            t.attack_analyzed_fraction(),
            t.attack_dropped_fraction(),
            t.css_requests
        );
    }
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> Result<(), ExitCode> {
    let read = |p: &PathBuf| {
        MetricsSeries::read_csv(p).map_err(|e| {
            eprintln!("{}: {e}", p.display());
            let io = matches!(e.kind(), csv::ErrorKind::Io(err) if err.kind() != std::io::ErrorKind::InvalidData);
            ExitCode::from(if io { EXIT_IO } else { EXIT_INVALID })
        })
    };
    let (ta, tb) = (read(&a)?.totals(), read(&b)?.totals());
    println!("segment,analyzed_a,analyzed_b,analyzed_delta,dropped_a,dropped_b,dropped_delta");
    let names: std::collections::BTreeSet<&String> = ta.keys().chain(tb.keys()).collect();
    for name in names {
        let x = ta.get(name).copied().unwrap_or_default();
        let y = tb.get(name).copied().unwrap_or_default();
        let (xa, ya) = (x.attack_analyzed_fraction(), y.attack_analyzed_fraction());
        let (xd, yd) = (x.attack_dropped_fraction(), y.attack_dropped_fraction());
        println!("{name},{xa:.4},{ya:.4},{:.4},{xd:.4},{yd:.4},{:.4}", ya - xa, yd - xd);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, no_collab, seed } => run(scenario, out, no_collab, seed),
        Command::Validate { scenario } => load(&scenario).map(|sc| {
            println!(
                "ok: {} segments, {} ticks, {} failures",
                sc.segments.len(),
                sc.spec.ticks,
                sc.spec.failures.len()
            );
        }),
        Command::Compare { a, b } => compare(a, b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
