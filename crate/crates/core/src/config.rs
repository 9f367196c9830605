//! Experiment configuration: a flat `key = value` file with `#` comments.
//! Omitted keys take the reference defaults; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{ConfigError, Result};
use crate::federated::ModelKind;
use crate::snn::ResetMode;
use crate::encoding::{NrfeVariant, TemporalMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Nrfe,
    Rate,
    /// Normalized intensities at every step.
    None,
}

/// Spread of the NRFE receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReceptiveField {
    /// Closed-form mean and spread from side, kernel, batch, channels, epochs.
    Derived,
    /// `N(0, 1)`.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub encoder: EncoderKind,
    pub nrfe_variant: NrfeVariant,
    pub temporal_mode: TemporalMode,
    pub receptive_field: ReceptiveField,
    pub encoder_kernel_size: usize,

    pub clients: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub eval_batch: usize,

    pub time_steps: usize,
    pub lambda: f64,
    pub theta: f64,
    pub alpha: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub reset: ResetMode,
    pub grad_clip: Option<f64>,

    pub partition: PartitionKind,
    pub per_class_per_client: usize,
    pub dirichlet_mu: f64,
    pub noise_ratio: f64,
    pub max_samples_per_client: Option<usize>,

    /// Training set in the binary dataset format; synthetic data when absent.
    pub data_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_side: usize,
    pub synth_channels: usize,

    pub record_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelKind::Snn,
            encoder: EncoderKind::Nrfe,
            nrfe_variant: NrfeVariant::Literal,
            temporal_mode: TemporalMode::ResamplePerStep,
            receptive_field: ReceptiveField::Derived,
            encoder_kernel_size: 3,
            clients: 20,
            fraction: 0.5,
            local_epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            rounds: 100,
            eval_batch: 64,
            time_steps: 10,
            lambda: 0.9,
            theta: 1.0,
            alpha: 0.3,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            reset: ResetMode::Hard,
            grad_clip: Some(5.0),
            partition: PartitionKind::Iid,
            per_class_per_client: 3,
            dirichlet_mu: 0.5,
            noise_ratio: 0.0,
            max_samples_per_client: None,
            data_path: None,
            test_path: None,
            synth_classes: 62,
            synth_per_class: 74,
            synth_test_per_class: 20,
            synth_side: 28,
            synth_channels: 3,
            record_time: false,
        }
    }
}

struct Field<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Field<'_> {
    fn type_err(&self, expected: &'static str) -> ConfigError {
        ConfigError::Type {
            line: self.line,
            key: self.key.to_string(),
            expected,
            value: self.value.to_string(),
        }
    }

    fn uint(&self) -> Result<usize, ConfigError> {
        self.value.parse().map_err(|_| self.type_err("a non-negative integer"))
    }

    fn u64(&self) -> Result<u64, ConfigError> {
        self.value.parse().map_err(|_| self.type_err("a non-negative integer"))
    }

    fn real(&self) -> Result<f64, ConfigError> {
        match self.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.type_err("a finite number")),
        }
    }

    fn boolean(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.type_err("true or false")),
        }
    }

    fn choice<T: Copy>(&self, options: &[(&str, T)], expected: &'static str) -> Result<T, ConfigError> {
        options
            .iter()
            .find(|(name, _)| *name == self.value)
            .map(|&(_, v)| v)
            .ok_or_else(|| self.type_err(expected))
    }

    fn optional<T>(&self, parse: impl Fn(&Self) -> Result<T, ConfigError>) -> Result<Option<T>, ConfigError> {
        if self.value == "none" {
            Ok(None)
        } else {
            parse(self).map(Some)
        }
    }
}

const MODELS: &[(&str, ModelKind)] = &[("snn", ModelKind::Snn), ("cnn", ModelKind::Cnn)];
const ENCODERS: &[(&str, EncoderKind)] = &[
    ("nrfe", EncoderKind::Nrfe),
    ("rate", EncoderKind::Rate),
    ("none", EncoderKind::None),
];
const VARIANTS: &[(&str, NrfeVariant)] = &[("literal", NrfeVariant::Literal), ("threshold", NrfeVariant::Threshold)];
const TEMPORAL: &[(&str, TemporalMode)] = &[
    ("resample_per_step", TemporalMode::ResamplePerStep),
    ("static", TemporalMode::Static),
];
const FIELDS: &[(&str, ReceptiveField)] = &[("derived", ReceptiveField::Derived), ("standard", ReceptiveField::Standard)];
const RESETS: &[(&str, ResetMode)] = &[("hard", ResetMode::Hard), ("soft", ResetMode::Soft)];
const PARTITIONS: &[(&str, PartitionKind)] = &[("iid", PartitionKind::Iid), ("dirichlet", PartitionKind::Dirichlet)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], value: &T) -> &'static str {
    options.iter().find(|(_, v)| v == value).map(|(n, _)| *n).expect("every variant is listed")
}

fn range(key: &str, reason: &str) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

impl ExperimentConfig {
    fn set(&mut self, f: &Field, base: &Path) -> Result<(), ConfigError> {
        let path = |f: &Field| -> Result<PathBuf, ConfigError> {
            let p = PathBuf::from(f.value);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        match f.key {
            "seed" => self.seed = f.u64()?,
            "model" => self.model = f.choice(MODELS, "snn or cnn")?,
            "encoder" => self.encoder = f.choice(ENCODERS, "nrfe, rate or none")?,
            "nrfe_variant" => self.nrfe_variant = f.choice(VARIANTS, "literal or threshold")?,
            "temporal_mode" => self.temporal_mode = f.choice(TEMPORAL, "resample_per_step or static")?,
            "receptive_field" => self.receptive_field = f.choice(FIELDS, "derived or standard")?,
            "encoder_kernel_size" => self.encoder_kernel_size = f.uint()?,
            "clients" => self.clients = f.uint()?,
            "fraction" => self.fraction = f.real()?,
            "local_epochs" => self.local_epochs = f.uint()?,
            "batch_size" => self.batch_size = f.uint()?,
            "learning_rate" => self.learning_rate = f.real()?,
            "rounds" => self.rounds = f.uint()?,
            "eval_batch" => self.eval_batch = f.uint()?,
            "time_steps" => self.time_steps = f.uint()?,
            "lambda" => self.lambda = f.real()?,
            "theta" => self.theta = f.real()?,
            "alpha" => self.alpha = f.real()?,
            "bn_epsilon" => self.bn_epsilon = f.real()?,
            "bn_momentum" => self.bn_momentum = f.real()?,
            "reset" => self.reset = f.choice(RESETS, "hard or soft")?,
            "grad_clip" => self.grad_clip = f.optional(Field::real)?,
            "partition" => self.partition = f.choice(PARTITIONS, "iid or dirichlet")?,
            "per_class_per_client" => self.per_class_per_client = f.uint()?,
            "dirichlet_mu" => self.dirichlet_mu = f.real()?,
            "noise_ratio" => self.noise_ratio = f.real()?,
            "max_samples_per_client" => self.max_samples_per_client = f.optional(Field::uint)?,
            "data_path" => self.data_path = f.optional(path)?,
            "test_path" => self.test_path = f.optional(path)?,
            "synth_classes" => self.synth_classes = f.uint()?,
            "synth_per_class" => self.synth_per_class = f.uint()?,
            "synth_test_per_class" => self.synth_test_per_class = f.uint()?,
            "synth_side" => self.synth_side = f.uint()?,
            "synth_channels" => self.synth_channels = f.uint()?,
            "record_time" => self.record_time = f.boolean()?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: f.line,
                    key: f.key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 }.into());
            }
            config.set(&Field { line: i + 1, key, value }, base)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ConfigError::MissingFile(path.to_path_buf()).into())
            }
            Err(e) => return Err(e.into()),
        };
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse_str(&text, base)
    }

    /// Range checks and referenced-file existence.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("clients", self.clients),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("time_steps", self.time_steps),
            ("per_class_per_client", self.per_class_per_client),
            ("encoder_kernel_size", self.encoder_kernel_size),
            ("synth_classes", self.synth_classes),
            ("synth_per_class", self.synth_per_class),
            ("synth_test_per_class", self.synth_test_per_class),
            ("synth_channels", self.synth_channels),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(range(key, "must be at least 1"));
        }
        if self.synth_side < 4 {
            return Err(range("synth_side", "must be at least 4"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(range("fraction", "must lie in (0, 1]"));
        }
        if self.learning_rate < 0.0 {
            return Err(range("learning_rate", "must be non-negative"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(range("lambda", "must lie in (0, 1)"));
        }
        if self.theta <= 0.0 {
            return Err(range("theta", "must be positive"));
        }
        if self.alpha <= 0.0 {
            return Err(range("alpha", "must be positive"));
        }
        if self.bn_epsilon <= 0.0 {
            return Err(range("bn_epsilon", "must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(range("bn_momentum", "must lie in (0, 1)"));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(range("grad_clip", "must be positive or `none`"));
        }
        if self.dirichlet_mu <= 0.0 {
            return Err(range("dirichlet_mu", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(range("noise_ratio", "must lie in [0, 1]"));
        }
        if self.max_samples_per_client == Some(0) {
            return Err(range("max_samples_per_client", "must be at least 1 or `none`"));
        }
        if self.data_path.is_some() != self.test_path.is_some() {
            return Err(range("test_path", "data_path and test_path go together"));
        }
        for p in [&self.data_path, &self.test_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(ConfigError::MissingReference(p.clone()));
            }
        }
        Ok(())
    }

    /// A copy with one key replaced, validated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut c = self.clone();
        c.set(&Field { line: 0, key, value }, Path::new("."))?;
        c.validate()?;
        Ok(c)
    }

    /// Every key with its value, in a form [`ExperimentConfig::parse_str`] reads back.
    pub fn render(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let path = |p: &Option<PathBuf>| opt(p.as_ref().map(|p| p.display().to_string()));
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model", name_of(MODELS, &self.model).into()),
            ("encoder", name_of(ENCODERS, &self.encoder).into()),
            ("nrfe_variant", name_of(VARIANTS, &self.nrfe_variant).into()),
            ("temporal_mode", name_of(TEMPORAL, &self.temporal_mode).into()),
            ("receptive_field", name_of(FIELDS, &self.receptive_field).into()),
            ("encoder_kernel_size", self.encoder_kernel_size.to_string()),
            ("clients", self.clients.to_string()),
            ("fraction", self.fraction.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("rounds", self.rounds.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("time_steps", self.time_steps.to_string()),
            ("lambda", self.lambda.to_string()),
            ("theta", self.theta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("bn_epsilon", self.bn_epsilon.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("reset", name_of(RESETS, &self.reset).into()),
            ("grad_clip", opt(self.grad_clip.map(|v| v.to_string()))),
            ("partition", name_of(PARTITIONS, &self.partition).into()),
            ("per_class_per_client", self.per_class_per_client.to_string()),
            ("dirichlet_mu", self.dirichlet_mu.to_string()),
            ("noise_ratio", self.noise_ratio.to_string()),
            ("max_samples_per_client", opt(self.max_samples_per_client.map(|v| v.to_string()))),
            ("data_path", path(&self.data_path)),
            ("test_path", path(&self.test_path)),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_per_class", self.synth_per_class.to_string()),
            ("synth_test_per_class", self.synth_test_per_class.to_string()),
            ("synth_side", self.synth_side.to_string()),
            ("synth_channels", self.synth_channels.to_string()),
            ("record_time", self.record_time.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
