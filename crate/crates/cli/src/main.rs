use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ferrosim::config::{ConfigOverrides, ExperimentConfig};
use ferrosim::experiment::{self, SYNTHETIC_SIGMA_NOTE};

#[derive(Parser)]
#[command(name = "ferrosim", version, about = "Hybrid-precision training on simulated FeFET crossbars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, curve and model dump.
    Train(Common),
    /// Run the program-cycle protocol and fit the variation macro-model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Program cycles per device and level.
        #[arg(long)]
        cycles: Option<i64>,
    },
    /// Score a dumped network on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding the dump files; defaults to the output directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    epochs: Option<i64>,
    /// binary, multilevel or float.
    #[arg(long)]
    mode: Option<String>,
    /// Macro-model file, `noiseless` or `default`.
    #[arg(long)]
    model: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_subset: Option<i64>,
    #[arg(long)]
    test_subset: Option<i64>,
}

impl Common {
    fn load(&self, cycles: Option<i64>) -> ferrosim::Result<ExperimentConfig> {
        let overrides = ConfigOverrides {
            seed: self.seed,
            epochs: self.epochs,
            mode: self.mode.clone(),
            model: self.model.clone(),
            out_dir: self.out.clone(),
            train_subset: self.train_subset,
            test_subset: self.test_subset,
            cycles,
        };
        ExperimentConfig::load(self.config.as_deref(), &overrides).map_err(|e| e.in_module("config"))
    }
}

fn run(cli: Cli) -> ferrosim::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = common.load(None)?;
            let report = experiment::run_experiment(&config)?;
            print!("{}", report.summary(&config));
            println!("outputs written to {}", config.out_dir.display());
        }
        Command::Calibrate { common, cycles } => {
            let config = common.load(cycles)?;
            let report = experiment::run_calibration(&config)?;
            print!("{}", report.stats.summary());
            if config.model_source == ferrosim::config::ModelSource::Default {
                println!("{SYNTHETIC_SIGMA_NOTE}");
            }
            println!("outputs written to {}", config.out_dir.display());
        }
        Command::Eval { common, dump } => {
            let config = common.load(None)?;
            let dir = dump.unwrap_or_else(|| config.out_dir.clone());
            let acc = experiment::run_eval(&config, &dir)?;
            println!("test_acc = {acc}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
