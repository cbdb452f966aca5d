//! Python bindings: configuration, the trainer, whole runs, trace reports
//! and the per-token building blocks.

use std::path::PathBuf;

use hapo_core::advantage::token_level_group_advantage;
use hapo_core::analyze::{render, Report};
use hapo_core::config::{apply_override, parse_override};
use hapo_core::entropy_stats::{batch_stats as core_batch_stats, TemperatureStats, DEFAULT_ENTROPY_FLOOR};
use hapo_core::loss::{clip_bounds as core_clip_bounds, token_surrogate as core_token_surrogate, ClipBounds};
use hapo_core::metrics::{read_jsonl, TraceRecord};
use hapo_core::sampler::{adaptive_temperature as core_adaptive_temperature, SamplerParams};
use hapo_core::HapoError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: HapoError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Converts any serializable value to the equivalent Python object.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn build_config(toml_text: Option<&str>, overrides: &[String]) -> Result<hapo_core::TrainConfig, HapoError> {
    let mut table = match toml_text {
        Some(t) => t
            .parse::<toml::Table>()
            .map_err(|e| HapoError::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        apply_override(&mut table, &k, &v)?;
    }
    hapo_core::TrainConfig::from_table(table)
}

/// Run configuration. Built from optional TOML text plus `key=value`
/// overrides using dotted keys, e.g. `clip.eps_high=0.3`.
#[pyclass(name = "TrainConfig", module = "hapo", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: hapo_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (toml = None, overrides = Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = build_config(toml, &overrides).map_err(py_err)?;
        Ok(PyTrainConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let pairs = overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        let inner = hapo_core::load_config(Some(&path), &pairs).map_err(py_err)?;
        Ok(PyTrainConfig { inner })
    }

    /// A copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let text = self.to_toml()?;
        Self::new(Some(&text), overrides)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn algo(&self) -> String {
        self.inner.algo.to_string()
    }

    #[getter]
    fn components(&self) -> PyResult<String> {
        Ok(self.inner.components().map_err(py_err)?.label())
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(algo={}, seed={}, steps={})", self.inner.algo, self.inner.seed, self.inner.steps)
    }
}

/// Step-by-step training driver. Construction runs the warm start and the
/// bootstrap rollout.
#[pyclass(name = "Trainer", module = "hapo")]
struct PyTrainer {
    inner: hapo_core::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(py: Python<'_>, config: PyTrainConfig) -> PyResult<Self> {
        let inner = py.detach(|| hapo_core::Trainer::new(config.inner)).map_err(py_err)?;
        Ok(PyTrainer { inner })
    }

    /// One training step. Returns the step metrics as a dict, or
    /// `(metrics, trace_records)` when `trace` is true.
    #[pyo3(signature = (evaluate = false, trace = false))]
    fn step<'py>(&mut self, py: Python<'py>, evaluate: bool, trace: bool) -> PyResult<Bound<'py, PyAny>> {
        let mut records = Vec::new();
        let inner = &mut self.inner;
        let metrics = py
            .detach(|| inner.step(evaluate, trace.then_some(&mut records)))
            .map_err(py_err)?;
        let metrics = to_py(py, &metrics)?;
        if trace {
            Ok((metrics, to_py(py, &records)?).into_pyobject(py)?.into_any())
        } else {
            Ok(metrics)
        }
    }

    /// Held-out `(greedy, sampled)` accuracy.
    fn evaluate(&self, py: Python<'_>) -> PyResult<(f64, f64)> {
        let inner = &self.inner;
        let r = py
            .detach(|| inner.evaluate(inner.state().step))
            .map_err(py_err)?;
        Ok((r.greedy, r.sampled))
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.state().step
    }

    /// Entropy statistics of the most recent batch.
    #[getter]
    fn entropy_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.state().last_stats)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn save_params(&self, path: PathBuf) -> PyResult<()> {
        self.inner.params().save(&path).map_err(py_err)
    }
}

/// Trains a full run into `out_dir` and returns its summary.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: PyTrainConfig, out_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let summary = py
        .detach(|| hapo_core::run(&config.inner, &out_dir))
        .map_err(py_err)?;
    to_py(py, &summary)
}

/// Renders a diagnostic table (CSV text) from a trace file.
#[pyfunction]
fn analyze(trace: PathBuf, report: &str) -> PyResult<String> {
    let report: Report = report.parse().map_err(py_err)?;
    let records: Vec<TraceRecord> = read_jsonl(&trace).map_err(py_err)?;
    render(report, &records).map_err(py_err)
}

/// Side-by-side CSV summary of two or more run directories.
#[pyfunction]
fn compare(dirs: Vec<PathBuf>) -> PyResult<String> {
    hapo_core::compare::compare(&dirs).map_err(py_err)
}

/// Percentile, spread and extremes of log-entropy over a batch.
#[pyfunction]
#[pyo3(signature = (entropies, rho = 80.0, floor = DEFAULT_ENTROPY_FLOOR))]
fn batch_stats<'py>(py: Python<'py>, entropies: Vec<f64>, rho: f64, floor: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_batch_stats(&entropies, rho, floor).map_err(py_err)?)
}

/// Scaled entropy `h̃` of one token under batch statistics.
#[pyfunction]
#[pyo3(signature = (entropy, entropies, rho = 80.0, floor = DEFAULT_ENTROPY_FLOOR))]
fn scaled_entropy(entropy: f64, entropies: Vec<f64>, rho: f64, floor: f64) -> PyResult<f64> {
    let stats = core_batch_stats(&entropies, rho, floor).map_err(py_err)?;
    Ok(stats.scale_entropy(entropy, floor).h_tilde)
}

/// Sampling temperature for a position with the given entropy.
#[pyfunction]
#[pyo3(signature = (entropy, quantile, sigma, t_base = 1.0, tau = 0.05))]
fn adaptive_temperature(entropy: f64, quantile: f64, sigma: f64, t_base: f64, tau: f64) -> f64 {
    let params = SamplerParams {
        t_base,
        tau,
        ..Default::default()
    };
    core_adaptive_temperature(entropy, Some(&TemperatureStats { quantile, sigma }), &params)
}

/// Per-token `(eps_low, eps_high)` for scaled entropy `h_tilde`.
#[pyfunction]
#[pyo3(signature = (h_tilde, eps_low = 0.2, eps_high = 0.28, mode = "continuous"))]
fn clip_bounds(h_tilde: f64, eps_low: f64, eps_high: f64, mode: &str) -> PyResult<(f64, f64)> {
    let mode = serde_json::from_value(serde_json::Value::String(mode.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown clip mode `{mode}`")))?;
    let base = ClipBounds {
        mode,
        eps_low,
        eps_high,
        ..Default::default()
    };
    base.validate().map_err(py_err)?;
    Ok(core_clip_bounds(h_tilde, &base))
}

/// Token-level group advantages, one list per sequence.
#[pyfunction]
fn token_advantages(rewards: Vec<f64>, lengths: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
    let view = token_level_group_advantage(&rewards, &lengths).map_err(py_err)?;
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for len in lengths {
        out.push(view.advantages[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Clipped surrogate value for one token and whether each side clipped.
#[pyfunction]
fn token_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> (f64, bool, bool) {
    let s = core_token_surrogate(ratio, advantage, eps_low, eps_high);
    (s.value, s.clipped_left, s.clipped_right)
}

#[pymodule]
fn hapo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(batch_stats, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(clip_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(token_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(token_surrogate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
