mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

/// Runs one experiment described by a JSON configuration file and writes
/// the event log, summary table and manifest into the output directory.
#[derive(Parser)]
#[command(name = "denselab", version, disable_help_subcommand = true)]
struct Args {
    /// Experiment configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `out` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for the compute pool.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Also run the independent cross-check route for each computation.
    #[arg(long)]
    oracle: bool,
}

fn main() -> ExitCode {
    ExitCode::from(real_main() as u8)
}

fn real_main() -> i32 {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => run::EXIT_OK,
                _ => run::EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };

    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return run::EXIT_USAGE;
        }
    };
    let parsed = match config::parse_config(&text) {
        Ok(parsed) => parsed,
        Err(errors) => {
            for err in &errors {
                eprintln!("config error: {err}");
            }
            return run::EXIT_USAGE;
        }
    };
    for warning in &parsed.warnings {
        eprintln!("config warning: {warning}");
    }

    let mut cfg = parsed.config;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from(&cfg.out));
    run::run(&cfg, &run::RunOptions { out_dir, oracle: args.oracle })
}
