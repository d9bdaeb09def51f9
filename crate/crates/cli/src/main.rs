use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fastslow_cli::{parse_config, run, CliOverrides};

/// Run a fast-slow homogenization command described by a TOML config.
#[derive(Parser, Debug)]
#[command(name = "fastslow", version)]
struct Args {
    /// Config file with `command`, `seed` and [system]/[estimator]/[study] tables.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set epsilon=0.2` or `--set study.members=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("configuration error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let overrides = CliOverrides { sets: args.sets, seed: args.seed, out: args.out };
    let outcome = parse_config(&args.config, &overrides).and_then(|config| run(&config));
    match outcome {
        Ok(manifest) => {
            println!("wrote {} files", manifest.files.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
