use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),

    #[error("batch-norm running statistics are undefined before the first training batch")]
    StatsUnavailable,

    #[error("class {class} has {available} samples, partition needs {required}")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures reading the binary dataset and checkpoint formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("label {label} out of range for {num_classes} classes (record {index})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("dataset is empty")]
    Empty,

    #[error("malformed content: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },

    #[error("`{key}` out of range: {reason}")]
    Range { key: String, reason: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },

    #[error("referenced file does not exist: {}", .0.display())]
    MissingReference(PathBuf),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
