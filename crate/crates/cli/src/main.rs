use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use secgrid::bench::{self, Backend, BenchSpec, Function, PaillierContext, CSV_HEADER, MIN_ITERATIONS, PAILLIER_BITS};
use secgrid::files::{load_config, load_script};
use secgrid::vectors;
use secgrid_core::sim::{run_scenario, AdversaryScript};

#[derive(Parser)]
#[command(name = "secgrid", version, about = "Smart-grid enclave protocol simulator and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes the event log and prints a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Event log destination (JSON lines).
        #[arg(long, default_value = "events.jsonl")]
        log: PathBuf,
    },
    /// Time one grid function on one backend; prints CSV.
    Bench {
        #[arg(long, value_enum, required_unless_present = "micro")]
        function: Option<Function>,
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, value_enum, default_value = "enclave")]
        backend: Backend,
        #[arg(long, default_value_t = MIN_ITERATIONS as u64, value_parser = clap::value_parser!(u64).range(MIN_ITERATIONS as u64..))]
        iterations: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Primitive costs instead of a grid function.
        #[arg(long, conflicts_with = "function")]
        micro: bool,
        #[arg(long)]
        no_header: bool,
    },
    /// Time decrypting a batch of reports inside the enclave; prints CSV.
    TransmitBench {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = MIN_ITERATIONS as u64, value_parser = clap::value_parser!(u64).range(MIN_ITERATIONS as u64..))]
        iterations: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        no_header: bool,
    },
    /// Print the crypto test vectors as JSON; fails if any does not verify.
    Vectors,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, script, seed, log } => run(config, script, seed, log),
        Command::Bench { function, users, backend, iterations, seed, micro, no_header } => {
            if !no_header {
                println!("{CSV_HEADER}");
            }
            if micro {
                for row in bench::micro_bench(iterations as usize, seed) {
                    println!("{row}");
                }
                return ExitCode::SUCCESS;
            }
            let function = function.expect("clap requires --function without --micro");
            let mut keys = (backend == Backend::Paillier).then(|| PaillierContext::new(PAILLIER_BITS, seed));
            let spec = BenchSpec { function, users, backend, iterations: iterations as usize, seed };
            println!("{}", bench::run_bench(&spec, keys.as_mut()));
            ExitCode::SUCCESS
        }
        Command::TransmitBench { users, iterations, seed, no_header } => {
            if !no_header {
                println!("{CSV_HEADER}");
            }
            println!("{}", bench::transmit_bench(users, iterations as usize, seed));
            ExitCode::SUCCESS
        }
        Command::Vectors => {
            let dump = vectors::dump();
            println!("{}", serde_json::to_string_pretty(&dump).expect("serializable"));
            if dump.gcm.iter().all(|v| v.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(config: PathBuf, script: Option<PathBuf>, seed: Option<u64>, log: PathBuf) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_missing() { 2 } else { 1 });
        }
    };
    let script = match script.map(|p| load_script(&p)).transpose() {
        Ok(s) => s.unwrap_or_else(AdversaryScript::new),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_missing() { 2 } else { 1 });
        }
    };
    let seed = seed.unwrap_or(cfg.seed);
    let outcome = match run_scenario(&cfg, &script, seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let written = File::create(&log).and_then(|f| {
        let mut w = BufWriter::new(f);
        outcome.log.write_jsonl(&mut w)?;
        w.flush()
    });
    if let Err(e) = written {
        eprintln!("error: cannot write {}: {e}", log.display());
        return ExitCode::FAILURE;
    }
    print!("{}", outcome.summary());
    println!("event log: {} ({} events)", log.display(), outcome.log.events.len());
    ExitCode::SUCCESS
}
