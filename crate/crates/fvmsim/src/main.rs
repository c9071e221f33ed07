//! Thin command-line front end over the simulator library.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fvmsim::binscan::{parse_mock_binary, scan_binary};
use fvmsim::corpus::generate_corpus;
use fvmsim::hio::HioTable;
use fvmsim::scenario::{Scenario, ScenarioError, ScenarioRunner};

#[derive(Parser)]
#[command(
    name = "fvmsim",
    about = "Deterministic simulator of OS-level service virtualization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and emit its event log as JSON Lines.
    Run {
        /// Scenario file (see scenarios/ for the shipped suite).
        scenario: PathBuf,
        /// Write the event log here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Pre-seed the host-IPC table from this file before the scenario runs.
        #[arg(long = "hio-seed")]
        hio_seed: Option<PathBuf>,
    },
    /// Scan a mock binary for hard-coded uses of a service name.
    Scan {
        /// Mock-binary source file.
        binary: PathBuf,
        /// Service name to search for (case-insensitive).
        #[arg(long)]
        service: String,
    },
    /// Generate a scanner test corpus with by-construction ground truth.
    Corpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Fraction of programs with at least one planted occurrence.
        #[arg(long)]
        fraction: f64,
        /// Output directory for the programs and the ground-truth manifest.
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_OK: u8 = 0;
const EXIT_ASSERTION: u8 = 1;
const EXIT_INPUT: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Cmd::Run {
            scenario,
            log,
            hio_seed,
        } => cmd_run(&scenario, log.as_deref(), hio_seed.as_deref()),
        Cmd::Scan { binary, service } => cmd_scan(&binary, &service),
        Cmd::Corpus {
            seed,
            count,
            fraction,
            out,
        } => cmd_corpus(seed, count, fraction, &out),
    };
    ExitCode::from(code)
}

fn cmd_run(
    scenario_path: &std::path::Path,
    log_path: Option<&std::path::Path>,
    hio_seed: Option<&std::path::Path>,
) -> u8 {
    let scenario = match Scenario::load(scenario_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("fvmsim: {e}");
            return EXIT_INPUT;
        }
    };

    let mut runner = ScenarioRunner::new();
    if let Some(seed_path) = hio_seed {
        let table = match fs::read_to_string(seed_path)
            .map_err(|e| e.to_string())
            .and_then(|text| HioTable::load_seed_text(&text).map_err(|e| e.to_string()))
        {
            Ok(table) => table,
            Err(e) => {
                eprintln!("fvmsim: cannot load {}: {e}", seed_path.display());
                return EXIT_INPUT;
            }
        };
        runner
            .sim_mut()
            .set_hio_table(table, Some(&seed_path.display().to_string()));
    }

    let result = runner.run(&scenario);
    let jsonl = runner.log().to_jsonl();
    match log_path {
        Some(path) => {
            if let Err(e) = fs::write(path, &jsonl) {
                eprintln!("fvmsim: cannot write {}: {e}", path.display());
                return EXIT_INPUT;
            }
        }
        None => print!("{jsonl}"),
    }

    match result {
        Ok(()) => {
            eprintln!("scenario {}: PASS", scenario.name);
            EXIT_OK
        }
        Err(e @ ScenarioError::Assertion { .. }) => {
            eprintln!("scenario {}: FAIL: {e}", scenario.name);
            EXIT_ASSERTION
        }
        Err(e) => {
            eprintln!("scenario {}: {e}", scenario.name);
            EXIT_INPUT
        }
    }
}

fn cmd_scan(binary_path: &std::path::Path, service: &str) -> u8 {
    let text = match fs::read_to_string(binary_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fvmsim: cannot read {}: {e}", binary_path.display());
            return EXIT_INPUT;
        }
    };
    let binary = match parse_mock_binary(&text) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("fvmsim: {}: {e}", binary_path.display());
            return EXIT_INPUT;
        }
    };
    match scan_binary(&binary, service) {
        Ok(occurrences) => {
            for occ in occurrences {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    occ.code_offset, occ.api, occ.arg_position, occ.klass, occ.matched_string
                );
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("fvmsim: {}: {e}", binary_path.display());
            EXIT_INPUT
        }
    }
}

fn cmd_corpus(seed: u64, count: usize, fraction: f64, out: &std::path::Path) -> u8 {
    if !(0.0..=1.0).contains(&fraction) {
        eprintln!("fvmsim: --fraction must be within [0, 1]");
        return EXIT_INPUT;
    }
    let corpus = generate_corpus(seed, count, fraction);
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("fvmsim: cannot create {}: {e}", out.display());
        return EXIT_INPUT;
    }
    let mut manifest = String::new();
    for entry in &corpus {
        let path = out.join(entry.file_name());
        if let Err(e) = fs::write(&path, &entry.source) {
            eprintln!("fvmsim: cannot write {}: {e}", path.display());
            return EXIT_INPUT;
        }
        let line = serde_json::json!({
            "file": entry.file_name(),
            "service": entry.service_name,
            "occurrences": entry.ground_truth,
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    let manifest_path = out.join("corpus.jsonl");
    if let Err(e) = fs::write(&manifest_path, manifest) {
        eprintln!("fvmsim: cannot write {}: {e}", manifest_path.display());
        return EXIT_INPUT;
    }
    eprintln!(
        "wrote {} programs and corpus.jsonl to {}",
        corpus.len(),
        out.display()
    );
    EXIT_OK
}
