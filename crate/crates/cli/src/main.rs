use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use martinv::{load_config, run, Command};

/// Inverts the pricing operator for Brownian martingales and checks the results.
#[derive(Debug, Parser)]
#[command(name = "martinv", version)]
struct Args {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "MARTINV_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(k) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("martinv: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("martinv: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    match run(args.command, &cfg, &args.out) {
        Ok(m) => {
            for v in &m.verdicts {
                println!("{} {}: {} (limit {}) {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.value, v.threshold, v.detail);
            }
            println!("{}: {} in {:.1} s", m.scenario, if m.pass { "pass" } else { "FAIL" }, m.wall_clock_s);
            if m.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("martinv: {e}");
            ExitCode::from(2)
        }
    }
}
