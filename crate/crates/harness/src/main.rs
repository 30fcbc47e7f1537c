use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfbsde_harness::run::exit_code;
use mfbsde_harness::{run, Command, ExperimentConfig, HarnessError};

/// Particle solver experiments for controlled mean-field FBSDEs.
#[derive(Debug, Parser)]
#[command(name = "mfbsde", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for manifest.json and CSV tables.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Zero wall-clock fields so identical configs give identical manifests.
    #[arg(long)]
    reference_mode: bool,
    /// Worker threads (overrides the config's `workers`).
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("mfbsde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32, HarnessError> {
    let cfg = ExperimentConfig::load(&cli.config)?;
    let workers = cli.workers.or(cfg.workers).unwrap_or(1);
    if workers == 0 {
        return Err(HarnessError::Config("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let manifest = pool.install(|| run(&cfg, cli.command, cli.reference_mode))?;
    for path in manifest.write(&cli.out)? {
        log::info!("wrote {}", path.display());
    }
    if let Some(e) = &manifest.error {
        eprintln!("mfbsde: {} failed: {e}", cli.command.name());
    }
    Ok(exit_code(&manifest))
}
