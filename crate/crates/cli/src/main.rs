use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use srp::harness::{
    bundled_names, emit_report, fuzz_decode, load_bundled, load_scenario, run_scenario, ConfigError, ReportFormat,
    ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "srp", version, about = "Secure route discovery simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario: a JSON file path or the name of a bundled scenario.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSONL event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "human")]
        report: ReportFormat,
    },
    /// Run every bundled scenario in parallel.
    RunAll {
        #[arg(long, default_value = "human")]
        report: ReportFormat,
    },
    ListScenarios,
    /// Throw random and mutated byte strings at the packet decoder.
    FuzzDecode {
        #[arg(long, default_value_t = 1_000_000)]
        iterations: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(arg: &str) -> Result<ScenarioConfig, ConfigError> {
    if Path::new(arg).exists() {
        load_scenario(arg)
    } else {
        load_bundled(arg)
    }
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { scenario, seed, trace, report } => {
            let mut cfg = match load(&scenario) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = match run_scenario(&cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(path) = trace {
                if let Err(e) = std::fs::write(&path, out.trace.to_jsonl()) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            }
            print!("{}", emit_report(&out.report, report));
            if out.report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
        Cmd::RunAll { report } => {
            let names: Vec<&str> = bundled_names().collect();
            let results: Vec<_> = names
                .par_iter()
                .map(|n| load_bundled(n).and_then(|c| run_scenario(&c)).map(|o| o.report))
                .collect();
            let mut code = ExitCode::SUCCESS;
            for (name, r) in names.iter().zip(results) {
                match r {
                    Ok(rep) => {
                        print!("{}", emit_report(&rep, report));
                        if report == ReportFormat::Human {
                            println!();
                        }
                        if !rep.passed() && code == ExitCode::SUCCESS {
                            code = ExitCode::from(EXIT_FAIL);
                        }
                    }
                    Err(e) => {
                        eprintln!("error: {name}: {e}");
                        return ExitCode::from(EXIT_CONFIG);
                    }
                }
            }
            code
        }
        Cmd::ListScenarios => {
            let mut out = std::io::stdout().lock();
            for n in bundled_names() {
                let desc = load_bundled(n).map(|c| c.description).unwrap_or_default();
                // A closed pipe (e.g. `| head`) is not an error worth a panic.
                if writeln!(out, "{n:<12} {desc}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Cmd::FuzzDecode { iterations, seed } => {
            let s = fuzz_decode(iterations, seed);
            println!(
                "{} inputs: {} decoded, {} rejected, {} non-canonical",
                s.iterations, s.decoded, s.rejected, s.non_canonical
            );
            if s.non_canonical == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
    }
}
