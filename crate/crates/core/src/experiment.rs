//! Wiring from a config to datasets, a federated run and its output files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::arch::Architecture;
use crate::checkpoint::{load_model, model_to_bytes, SavedModel};
use crate::cnn::CnnConfig;
use crate::config::{EncoderKind, ExperimentConfig, PartitionKind, ReceptiveField};
use crate::data::{
    add_salt_pepper, load_dataset, partition_dirichlet, partition_iid, synth_dataset, LabeledDataset, Partition,
};
use crate::encoding::{receptive_field_params, Encoder};
use crate::energy::{
    build_energy_report, compare_with_reference, describe, rates_from_recorder, reference_rates, EnergyCosts,
    EnergyLedger,
};
use crate::error::{Error, FormatError, Result};
use crate::federated::{encode_eval, evaluate, metrics_csv, run_experiment, FedConfig, Model, RoundMetrics, Setup};
use crate::io::write_atomic;
use crate::rng::{derived_rng, stream};
use crate::snn::{SnnConfig, SpikeFunction};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ENERGY_FILE: &str = "energy.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Training and test sets: loaded from disk, or synthesized from the seed.
pub fn load_data(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match (&config.data_path, &config.test_path) {
        (Some(train), Some(test)) => (load_dataset(train)?, load_dataset(test)?),
        _ => {
            let synth = |per_class, s| {
                synth_dataset(
                    config.synth_classes,
                    per_class,
                    config.synth_channels,
                    config.synth_side,
                    &mut derived_rng(config.seed, &[s]),
                )
            };
            (
                synth(config.synth_per_class, stream::SYNTH_TRAIN)?,
                synth(config.synth_test_per_class, stream::SYNTH_TEST)?,
            )
        }
    };
    if (train.channels, train.side, train.num_classes) != (test.channels, test.side, test.num_classes) {
        return Err(FormatError::Malformed(format!(
            "training set is {}x{}x{} with {} classes, test set {}x{}x{} with {}",
            train.channels, train.side, train.side, train.num_classes, test.channels, test.side, test.side,
            test.num_classes
        ))
        .into());
    }
    Ok((train, test))
}

pub fn encoder_for(config: &ExperimentConfig, side: usize, channels: usize) -> Result<Encoder> {
    Ok(match config.encoder {
        EncoderKind::Nrfe => {
            let mut p = receptive_field_params(
                side,
                config.encoder_kernel_size,
                config.batch_size,
                channels,
                config.local_epochs,
            )?
            .with_variant(config.nrfe_variant)
            .with_temporal_mode(config.temporal_mode);
            if config.receptive_field == ReceptiveField::Standard {
                p = p.with_field(0.0, 1.0);
            }
            Encoder::Nrfe(p)
        }
        EncoderKind::Rate => Encoder::Rate,
        EncoderKind::None => Encoder::Direct,
    })
}

/// Run settings for data of the given shape.
pub fn setup_for(config: &ExperimentConfig, train: &LabeledDataset) -> Result<Setup> {
    Ok(Setup {
        fed: FedConfig {
            clients: config.clients,
            fraction: config.fraction,
            local_epochs: config.local_epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            rounds: config.rounds,
            eval_batch: config.eval_batch,
        },
        model: config.model,
        snn: SnnConfig {
            time_steps: config.time_steps,
            leak: config.lambda,
            threshold: config.theta,
            alpha: config.alpha,
            bn_epsilon: config.bn_epsilon,
            bn_momentum: config.bn_momentum,
            reset: config.reset,
            spike_fn: SpikeFunction::Heaviside,
            grad_clip: config.grad_clip,
        },
        cnn: CnnConfig {
            bn_epsilon: config.bn_epsilon,
            bn_momentum: config.bn_momentum,
            grad_clip: config.grad_clip,
        },
        encoder: encoder_for(config, train.side, train.channels)?,
        arch: Architecture::reference(train.channels, train.side, train.num_classes),
        seed: config.seed,
        record_time: config.record_time,
    })
}

/// Client shards as index lists into the training set.
pub fn partition_for(config: &ExperimentConfig, train: &LabeledDataset) -> Result<Partition> {
    let mut rng = derived_rng(config.seed, &[stream::PARTITION]);
    let partition = match config.partition {
        PartitionKind::Iid => partition_iid(train, config.clients, config.per_class_per_client, &mut rng)?,
        PartitionKind::Dirichlet => partition_dirichlet(train, config.clients, config.dirichlet_mu, &mut rng)?,
    };
    match config.max_samples_per_client {
        Some(max) => partition.truncated(max, &mut derived_rng(config.seed, &[stream::PARTITION, 1])),
        None => Ok(partition),
    }
}

/// Everything [`run_experiment`] consumes.
pub struct Prepared {
    pub setup: Setup,
    pub shards: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

/// Loads or synthesizes data, corrupts the training images when asked,
/// partitions them and builds the run settings. The test set stays clean.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (mut train, test) = load_data(config)?;
    if config.noise_ratio > 0.0 {
        train = add_salt_pepper(&train, config.noise_ratio, &mut derived_rng(config.seed, &[stream::NOISE]))?;
    }
    let partition = partition_for(config, &train)?;
    let setup = setup_for(config, &train)?;
    let shards = partition.assignments.iter().map(|a| train.subset(a)).collect();
    Ok(Prepared { setup, shards, test })
}

/// Per-layer energies of `model` with rates measured on `data`.
pub fn measure_energy(
    model: &mut Model,
    encoder: &Encoder,
    seed: u64,
    data: &LabeledDataset,
    eval_batch: usize,
) -> Result<(f64, EnergyLedger)> {
    let layers = describe(model.architecture())?;
    let t = model.time_steps();
    let input = match model {
        Model::Snn(_) => encoder,
        Model::Cnn(_) => &Encoder::Direct,
    };
    let encoded = encode_eval(input, t, seed, data)?;
    let eval = evaluate(model, &encoded, &data.labels, eval_batch)?;
    let rates = match model {
        Model::Snn(_) => Some(rates_from_recorder(&layers, &eval.recorder)?),
        Model::Cnn(_) => None,
    };
    let ledger = build_energy_report(&layers, rates.as_deref(), &EnergyCosts::default(), t)?;
    Ok((eval.accuracy, ledger))
}

/// In-memory results of one training run, written only once complete.
pub struct Artifacts {
    pub metrics: Vec<RoundMetrics>,
    pub ledger: EnergyLedger,
    pub metrics_csv: String,
    pub checkpoint: Vec<u8>,
    pub config_resolved: String,
}

impl Artifacts {
    /// Creates `out` and writes the four files, each by atomic rename.
    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        write_atomic(&out.join(METRICS_FILE), self.metrics_csv.as_bytes())?;
        write_atomic(&out.join(ENERGY_FILE), self.ledger.to_csv().as_bytes())?;
        write_atomic(&out.join(CHECKPOINT_FILE), &self.checkpoint)?;
        write_atomic(&out.join(RESOLVED_FILE), self.config_resolved.as_bytes())?;
        Ok(())
    }
}

pub fn run_train(config: &ExperimentConfig) -> Result<Artifacts> {
    let Prepared { setup, shards, test } = prepare(config)?;
    let result = run_experiment(&setup, shards, &test)?;
    let mut model = result.model;
    let (_, ledger) = measure_energy(&mut model, &setup.encoder, setup.seed, &test, setup.fed.eval_batch)?;
    let saved = SavedModel {
        model,
        encoder: setup.encoder.clone(),
        seed: setup.seed,
    };
    Ok(Artifacts {
        metrics_csv: metrics_csv(&result.metrics, setup.arch.activated_layers()),
        metrics: result.metrics,
        ledger,
        checkpoint: model_to_bytes(&saved),
        config_resolved: config.render(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Participation fraction `F`.
    Clients,
    /// Training samples per client: per class under IID, a cap under Dirichlet.
    Samples,
    Noise,
    Alpha,
    Timestep,
    Leak,
    /// Dirichlet concentration; switches the partition to Dirichlet.
    Dirichlet,
}

const AXES: [(&str, SweepAxis); 7] = [
    ("clients", SweepAxis::Clients),
    ("samples", SweepAxis::Samples),
    ("noise", SweepAxis::Noise),
    ("alpha", SweepAxis::Alpha),
    ("timestep", SweepAxis::Timestep),
    ("leak", SweepAxis::Leak),
    ("dirichlet", SweepAxis::Dirichlet),
];

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AXES.iter()
            .find(|(n, _)| *n == s)
            .map(|&(_, a)| a)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sweep axis `{s}`")))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = AXES.iter().find(|(_, a)| a == self).map(|(n, _)| *n).expect("listed");
        f.write_str(name)
    }
}

impl SweepAxis {
    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let key = match self {
            SweepAxis::Clients => "fraction",
            SweepAxis::Samples => match config.partition {
                PartitionKind::Iid => "per_class_per_client",
                PartitionKind::Dirichlet => "max_samples_per_client",
            },
            SweepAxis::Noise => "noise_ratio",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Timestep => "time_steps",
            SweepAxis::Leak => "lambda",
            SweepAxis::Dirichlet => {
                return config.with_override("partition", "dirichlet")?.with_override("dirichlet_mu", value)
            }
        };
        config.with_override(key, value)
    }
}

pub struct SweepRun {
    pub value: String,
    pub artifacts: Artifacts,
}

/// One training run per value, all from the config's master seed so that
/// runs differ only in the swept setting.
pub fn run_sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[String], parallel: bool) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| axis.apply(config, v)).collect::<Result<_>>()?;
    let artifacts: Vec<Artifacts> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_train(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect::<Result<_>>()
        })?
    } else {
        configs.iter().map(run_train).collect::<Result<_>>()?
    };
    Ok(values
        .iter()
        .zip(artifacts)
        .map(|(v, artifacts)| SweepRun {
            value: v.clone(),
            artifacts,
        })
        .collect())
}

/// Every run's metrics rows behind a leading `sweep_value` column.
pub fn sweep_csv(runs: &[SweepRun]) -> String {
    let mut out = String::new();
    for (i, run) in runs.iter().enumerate() {
        let mut lines = run.artifacts.metrics_csv.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            out.push_str("sweep_value,");
            out.push_str(header);
            out.push('\n');
        }
        for line in lines {
            out.push_str(&run.value);
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Subdirectory of a sweep output holding one value's run.
pub fn sweep_subdir(axis: SweepAxis, value: &str) -> String {
    format!("{axis}_{value}")
}

pub fn write_sweep(runs: &[SweepRun], axis: SweepAxis, out: &Path) -> Result<()> {
    for run in runs {
        run.artifacts.write(&out.join(sweep_subdir(axis, &run.value)))?;
    }
    write_atomic(&out.join(SWEEP_FILE), sweep_csv(runs).as_bytes())
}

/// Energy report for a checkpoint, with rates measured on `data` or taken
/// from the published table. Returns the ledger and a side-by-side
/// comparison against the published rows when the reference rates were used.
pub fn run_energy(
    checkpoint: &Path,
    data: &Path,
    use_reference_rates: bool,
    eval_batch: usize,
) -> Result<(EnergyLedger, Option<String>)> {
    let mut saved = load_model(checkpoint)?;
    let data = load_dataset(data)?;
    let arch = saved.model.architecture();
    if (data.channels, data.side, data.num_classes) != (arch.in_channels, arch.input_side, arch.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "dataset is {}x{}x{} with {} classes, the model expects {}x{}x{} with {}",
            data.channels, data.side, data.side, data.num_classes, arch.in_channels, arch.input_side,
            arch.input_side, arch.num_classes
        )));
    }
    if use_reference_rates {
        let layers = describe(arch)?;
        let rates = reference_rates();
        if rates.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "published rates cover {} layers, the model has {}",
                rates.len(),
                layers.len()
            )));
        }
        let t = match &saved.model {
            Model::Snn(m) => m.config().time_steps,
            Model::Cnn(_) => SnnConfig::default().time_steps,
        };
        let ledger = build_energy_report(&layers, Some(&rates), &EnergyCosts::default(), t)?;
        let comparison = compare_with_reference(&ledger);
        return Ok((ledger, Some(comparison)));
    }
    let (_, ledger) = measure_energy(&mut saved.model, &saved.encoder, saved.seed, &data, eval_batch)?;
    Ok((ledger, None))
}
