//! Python bindings. Structured results cross the boundary as the same JSON
//! the command line writes, decoded into plain dicts and lists.

use std::path::PathBuf;

use ppdmpc::batch::{self, RunFile, RunManifest};
use ppdmpc::models::{self, EgoControl, EgoState};
use ppdmpc::sim::{self, ControllerKind};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load(config: Option<&str>) -> PyResult<RunFile> {
    config.map_or_else(|| Ok(RunFile::default()), |t| RunFile::from_toml(t).map_err(value_error))
}

fn to_python<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn controller(name: &str) -> PyResult<ControllerKind> {
    name.parse().map_err(value_error)
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunFile::default().to_toml().map_err(value_error)
}

/// Sampled initial world for `seed`.
#[pyfunction]
#[pyo3(signature = (seed, config = None))]
fn sample_scenario(py: Python<'_>, seed: u64, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let file = load(config)?;
    let world = py.detach(|| file.episode.sample(seed)).map_err(value_error)?;
    to_python(py, &world)
}

/// Run one closed-loop episode and return its log.
#[pyfunction]
#[pyo3(signature = (seed, controller_kind, sigma_a, config = None))]
fn run_episode(py: Python<'_>, seed: u64, controller_kind: &str, sigma_a: f64, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let file = load(config)?;
    let kind = controller(controller_kind)?;
    let log = py
        .detach(|| file.episode.sample(seed).and_then(|w| sim::run_episode(&w, kind, sigma_a, &file.episode)))
        .map_err(value_error)?;
    to_python(py, &log)
}

/// Run a batch into `output` and return the metrics rows.
#[pyfunction]
#[pyo3(signature = (output, scenarios = None, sigmas = None, controllers = None, base_seed = None, workers = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn run_batch(
    py: Python<'_>,
    output: PathBuf,
    scenarios: Option<usize>,
    sigmas: Option<Vec<f64>>,
    controllers: Option<Vec<String>>,
    base_seed: Option<u64>,
    workers: Option<usize>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let file = load(config)?;
    let defaults = file.run;
    let manifest = RunManifest {
        controllers: match controllers {
            Some(c) => c.iter().map(|n| controller(n)).collect::<PyResult<_>>()?,
            None => defaults.controllers,
        },
        sigmas: sigmas.unwrap_or(defaults.sigmas),
        scenarios: scenarios.unwrap_or(defaults.scenarios),
        base_seed: base_seed.unwrap_or(defaults.base_seed),
        config: None,
        output,
        workers: workers.unwrap_or(defaults.workers),
    };
    let summary = py.detach(|| batch::run_batch(&manifest, &file.episode)).map_err(value_error)?;
    to_python(py, &summary.metrics)
}

/// One integration step of the tractor-trailer model.
#[pyfunction]
#[pyo3(signature = (state, control, dt = 0.2))]
fn ego_step(state: [f64; 5], control: [f64; 2], dt: f64) -> PyResult<[f64; 5]> {
    let [px, py, vx, th1, th2] = state;
    let x = EgoState::new(px, py, vx, th1, th2);
    let u = EgoControl::new(control[0], control[1]);
    let next = models::ego_step(&x, &u, &RunFile::default().episode.geometry, dt).map_err(value_error)?;
    Ok(next.to_array())
}

#[pymodule]
pub fn pyppdmpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(sample_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    m.add_function(wrap_pyfunction!(ego_step, m)?)?;
    Ok(())
}
