//! Python bindings: configs in the `key = value` text format, synthetic
//! data, partitions, training runs and energy reports.

use std::path::Path;

use fedsnn::config::ExperimentConfig;
use fedsnn::data::synth_dataset;
use fedsnn::encoding::{receptive_field_params, Encoder};
use fedsnn::energy::{build_energy_report, compare_with_reference, describe, reference_rates, EnergyCosts};
use fedsnn::experiment::{encoder_for, load_data, partition_for, run_train};
use fedsnn::arch::Architecture;
use fedsnn::rng::{derived_rng, rng_from, stream};
use fedsnn::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::parse_str(text, Path::new(".")).map_err(to_py)
}

/// Every key at its default, in config-file form.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().render()
}

/// Validates config text and returns it with every key filled in.
#[pyfunction]
fn resolve_config(text: &str) -> PyResult<String> {
    Ok(parse(text)?.render())
}

/// Receptive-field mean and spread for side, kernel, batch, channels, epochs.
#[pyfunction]
fn receptive_field(side: usize, kernel_size: usize, batch_size: usize, channels: usize, epochs: usize) -> PyResult<(f64, f64)> {
    let p = receptive_field_params(side, kernel_size, batch_size, channels, epochs).map_err(to_py)?;
    Ok((p.mu_g, p.sigma_g))
}

/// Synthetic images as `(images, labels)`; each image is `channels*side*side` bytes.
#[pyfunction]
#[pyo3(signature = (classes, per_class, side = 28, channels = 3, seed = 1))]
fn synth(classes: usize, per_class: usize, side: usize, channels: usize, seed: u64) -> PyResult<(Vec<Vec<u8>>, Vec<usize>)> {
    let ds = synth_dataset(classes, per_class, channels, side, &mut derived_rng(seed, &[stream::SYNTH_TRAIN])).map_err(to_py)?;
    Ok((ds.images, ds.labels))
}

/// Training-set indices held by each client under the config's partition.
#[pyfunction]
fn partition(config: &str) -> PyResult<Vec<Vec<usize>>> {
    let c = parse(config)?;
    let (train, _) = load_data(&c).map_err(to_py)?;
    Ok(partition_for(&c, &train).map_err(to_py)?.assignments)
}

/// Encodes one image (bytes, `channels*side*side`) with the config's encoder;
/// returns `time_steps` flat lists of values.
#[pyfunction]
#[pyo3(signature = (config, image, seed = 0))]
fn encode(config: &str, image: Vec<u8>, seed: u64) -> PyResult<Vec<Vec<f32>>> {
    let c = parse(config)?;
    let (channels, side) = (c.synth_channels, c.synth_side);
    if image.len() != channels * side * side {
        return Err(PyValueError::new_err(format!(
            "image has {} values, config implies {channels}x{side}x{side}",
            image.len()
        )));
    }
    let encoder: Encoder = encoder_for(&c, side, channels).map_err(to_py)?;
    let tensor = Tensor::new(vec![channels, side, side], image.into_iter().map(f32::from).collect()).map_err(to_py)?;
    let train = encoder.encode(&tensor, c.time_steps, &mut rng_from(seed)).map_err(to_py)?;
    Ok(train.steps.into_iter().map(|t| t.data().to_vec()).collect())
}

/// Runs a full experiment; returns metrics and energy CSVs, the final
/// accuracy and the checkpoint bytes.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let c = parse(config)?;
    let a = py.detach(|| run_train(&c)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("metrics_csv", &a.metrics_csv)?;
    out.set_item("energy_csv", a.ledger.to_csv())?;
    out.set_item("final_accuracy", a.metrics.last().map(|m| m.test_acc))?;
    out.set_item("checkpoint", a.checkpoint.as_slice())?;
    Ok(out)
}

/// Energy report of the reference stack with the published spike rates, as
/// `(csv, comparison listing)`.
#[pyfunction]
#[pyo3(signature = (time_steps = 10))]
fn reference_energy(time_steps: usize) -> PyResult<(String, String)> {
    let layers = describe(&Architecture::reference(3, 28, 62)).map_err(to_py)?;
    let ledger = build_energy_report(&layers, Some(&reference_rates()), &EnergyCosts::default(), time_steps).map_err(to_py)?;
    Ok((ledger.to_csv(), compare_with_reference(&ledger)))
}

#[pymodule]
fn fedsnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(reference_energy, m)?)?;
    Ok(())
}
