//! Command-line front end. Exit status 0 on success, 1 for configuration and
//! usage errors, 2 for failures while running.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{save_dataset, synth_dataset};
use crate::error::{ConfigError, Error, Result};
use crate::experiment::{run_energy, run_sweep, run_train, write_sweep, SweepAxis, ENERGY_FILE};
use crate::io::write_atomic;
use crate::rng::{derived_rng, stream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable overriding the config's master seed.
pub const SEED_ENV: &str = "FEDSNN_SEED";

#[derive(Parser, Debug)]
#[command(name = "fedsnn", version, about = "Federated spiking-network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one federated model; writes metrics, energy report, checkpoint and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per value of a setting, plus a combined CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// clients, samples, noise, alpha, timestep, leak or dirichlet
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Run the values on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Per-layer energy report of a checkpoint, with spike rates measured on a dataset.
    Energy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the published per-layer rates instead of measuring.
        #[arg(long)]
        reference_rates: bool,
        #[arg(long, default_value_t = 64)]
        eval_batch: usize,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 28)]
        side: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        config.seed = seed.trim().parse().map_err(|_| ConfigError::Type {
            line: 0,
            key: SEED_ENV.into(),
            expected: "a non-negative integer",
            value: seed.clone(),
        })?;
    }
    Ok(config)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => {
            let config = load_config(&config)?;
            let artifacts = run_train(&config)?;
            artifacts.write(&out)?;
            if let Some(last) = artifacts.metrics.last() {
                println!("round {} test accuracy {:.4}", last.round, last.test_acc);
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            parallel,
        } => {
            let config = load_config(&config)?;
            let axis: SweepAxis = axis.parse().map_err(|_| ConfigError::Type {
                line: 0,
                key: "axis".into(),
                expected: "clients, samples, noise, alpha, timestep, leak or dirichlet",
                value: axis.clone(),
            })?;
            let runs = run_sweep(&config, axis, &values, parallel)?;
            write_sweep(&runs, axis, &out)?;
            for run in &runs {
                if let Some(last) = run.artifacts.metrics.last() {
                    println!("{axis}={} round {} test accuracy {:.4}", run.value, last.round, last.test_acc);
                }
            }
        }
        Command::Energy {
            ckpt,
            data,
            out,
            reference_rates,
            eval_batch,
        } => {
            let (ledger, comparison) = run_energy(&ckpt, &data, reference_rates, eval_batch)?;
            std::fs::create_dir_all(&out)?;
            write_atomic(&out.join(ENERGY_FILE), ledger.to_csv().as_bytes())?;
            match comparison {
                Some(c) => print!("{c}"),
                None => print!("{}", ledger.to_csv()),
            }
        }
        Command::Synth {
            classes,
            per_class,
            out,
            side,
            channels,
            seed,
        } => {
            let ds = synth_dataset(classes, per_class, channels, side, &mut derived_rng(seed, &[stream::SYNTH_TRAIN]))?;
            save_dataset(&ds, &out)?;
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
