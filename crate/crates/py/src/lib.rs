use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use myq_core::calib::{CalibConfig, CalibMethod};
use myq_core::harness::{self, read_samples, write_samples, DomainSpec, PipelineConfig};
use myq_core::model::{load_model, save_model};
use myq_core::quant::save_quantized;
use myq_core::sensitivity::{self, RankOrder, SensitivityMetric, SensitivityRank};
use myq_core::{build_toy_encoder, EncoderConfig, Error};

create_exception!(myq, BudgetError, PyValueError, "The budget is below the 1-bit floor.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Budget { .. } => BudgetError::new_err(e.to_string()),
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Size in MB of a model with `bits[l]` bits for each of `sizes[l]` parameters.
#[pyfunction]
fn model_size(bits: Vec<u32>, sizes: Vec<usize>) -> PyResult<f64> {
    sensitivity::compute_model_size(&bits, &sizes).map_err(py_err)
}

/// Allocates bit depths within one bit of each other under `budget_mb`.
/// Returns `(bits, size_mb)`.
#[pyfunction]
#[pyo3(signature = (values, sizes, budget_mb, order = "asc"))]
fn allocate(values: Vec<f64>, sizes: Vec<usize>, budget_mb: f64, order: &str) -> PyResult<(Vec<u32>, f64)> {
    let rank = SensitivityRank::from_values(values, SensitivityMetric::Median, parse::<RankOrder>(order)?);
    let plan = sensitivity::allocate_uniform_constrained(&rank, &sizes, budget_mb).map_err(py_err)?;
    Ok((plan.bits, plan.size_mb))
}

#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    harness::wer(reference, hypothesis).map_err(py_err)
}

#[pyfunction]
fn cer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    harness::cer(reference, hypothesis).map_err(py_err)
}

/// Writes a toy encoder to `path` and returns its per-layer parameter counts.
#[pyfunction]
#[pyo3(signature = (path, seed = 0, layers = 2, hidden = 32, heads = 4, vocab = 32, channels = 8, length = 64))]
#[allow(clippy::too_many_arguments)]
fn toy_encoder(
    path: &str,
    seed: u64,
    layers: usize,
    hidden: usize,
    heads: usize,
    vocab: usize,
    channels: usize,
    length: usize,
) -> PyResult<Vec<usize>> {
    let cfg = EncoderConfig {
        layers,
        hidden,
        heads,
        ffn: 2 * hidden,
        vocab,
        input_channels: channels,
        input_len: length,
        ..EncoderConfig::default()
    };
    let m = build_toy_encoder(&cfg, seed).map_err(py_err)?;
    save_model(&m, path).map_err(py_err)?;
    Ok(m.param_count())
}

/// Writes `count` Gaussian samples of shape `[channels, length]` to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, channels, length, count = 32, scale = 1.0, seed = 0, held_out = false))]
fn make_domain(
    out_dir: &str,
    channels: usize,
    length: usize,
    count: usize,
    scale: f64,
    seed: u64,
    held_out: bool,
) -> PyResult<usize> {
    let mut spec = DomainSpec::scaled(channels, length, count, scale, seed);
    if held_out {
        spec = spec.held_out();
    }
    let samples = harness::make_domain(&spec).map_err(py_err)?;
    Ok(write_samples(out_dir, &samples).map_err(py_err)?.len())
}

/// Sense, allocate, calibrate, quantize and evaluate in one call.
#[pyfunction]
#[pyo3(signature = (model, calib_dir, eval_dir, budget_mb, metric = "median", calib_method = "minmax", act_bits = 8, seed = 0, out = None))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline<'py>(
    py: Python<'py>,
    model: &str,
    calib_dir: &str,
    eval_dir: &str,
    budget_mb: f64,
    metric: &str,
    calib_method: &str,
    act_bits: u32,
    seed: u64,
    out: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = PipelineConfig {
        metric: parse(metric)?,
        seed,
        calib: CalibConfig {
            act_bits,
            ..CalibConfig::with_method(parse::<CalibMethod>(calib_method)?)
        },
        ..PipelineConfig::default()
    };
    let m = load_model(model).map_err(py_err)?;
    let calib = read_samples(calib_dir).map_err(py_err)?;
    let eval = read_samples(eval_dir).map_err(py_err)?;
    let run = py
        .detach(|| harness::run_pipeline(&m, &calib, &eval, budget_mb, &cfg))
        .map_err(py_err)?;
    if let Some(path) = out {
        save_quantized(&run.qmodel, path).map_err(py_err)?;
    }
    let d = PyDict::new(py);
    d.set_item("bits", run.plan.plan.bits)?;
    d.set_item("size_mb", run.plan.plan.size_mb)?;
    d.set_item("wer", run.eval.wer)?;
    d.set_item("cer", run.eval.cer)?;
    d.set_item("top1", run.eval.top1)?;
    d.set_item("fidelity", run.eval.fidelity)?;
    d.set_item("cosine_distance", run.eval.cosine_distance)?;
    d.set_item("calib_seconds", run.calib.seconds)?;
    Ok(d)
}

#[pymodule]
fn myq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BudgetError", m.py().get_type::<BudgetError>())?;
    m.add_function(wrap_pyfunction!(model_size, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(toy_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(make_domain, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
