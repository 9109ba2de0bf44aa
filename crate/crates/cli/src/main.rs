//! Command-line front end for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointinv::harness::{self, ExperimentConfig};
use jointinv::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "jointinv", version, about = "Joint coefficient reconstruction with a learned relation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "JOINTINV_THREADS")]
    threads: Option<usize>,

    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training set, the truth and the measurement.
    Generate,
    /// Fit the relation (or load the surrogate) and save it.
    Train,
    /// Invert a fresh measurement with the saved relation.
    Invert,
    /// Tabulate step-one and step-two errors of the saved report.
    Evaluate,
    /// Error tables over the (J, alpha0) grid.
    Sweep,
    /// Reconstruction change under relation perturbations.
    Sensitivity,
    /// generate, train, invert and evaluate.
    Pipeline,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(cfg.out_dir())?;
    let echo = cfg.out_dir().join("config.toml");
    jointinv::io::write_text(&echo, &cfg.to_toml()?)?;
    let manifest = match cli.command {
        Command::Generate => harness::generate(&cfg)?,
        Command::Train => harness::train(&cfg)?,
        Command::Invert => harness::invert(&cfg)?,
        Command::Evaluate => harness::evaluate(&cfg)?,
        Command::Sweep => {
            let (m, tables) = harness::run_sweep(&cfg)?;
            print!("{}", tables.f_table.to_csv());
            print!("{}", tables.g_table.to_csv());
            m
        }
        Command::Sensitivity => {
            let (m, t) = harness::run_sensitivity(&cfg)?;
            print!("{}", t.to_csv());
            m
        }
        Command::Pipeline => {
            let out = harness::run_pipeline(&cfg)?;
            let (f, g) = harness::coefficient_names(cfg.experiment);
            let last = out.report.last();
            println!(
                "{f} error {:e}, {g} error {:e}",
                last.f_error.unwrap_or(f64::NAN),
                last.g_error.unwrap_or(f64::NAN)
            );
            out.manifest
        }
    };
    for p in &manifest.artifacts {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
