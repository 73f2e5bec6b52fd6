//! Python bindings. Structured values cross the boundary as JSON strings.

use std::path::PathBuf;

use mapfuse::bench::{self, EvalRequest, ReportFormat, RunConfig};
use mapfuse::corruption::{parse_kind_list, parse_severity_list, CorruptionKind};
use mapfuse::metrics::{self, AccuracyGrid};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(s) => RunConfig::from_json(s).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Default run configuration as JSON.
#[pyfunction]
#[pyo3(signature = (baseline=false))]
fn default_config(baseline: bool) -> String {
    if baseline { RunConfig::baseline() } else { RunConfig::default() }.to_json()
}

#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    Ok(RunConfig::from_json(config_json).map_err(err)?.hash())
}

/// Corruption names in report order.
#[pyfunction]
fn corruption_names() -> Vec<&'static str> {
    CorruptionKind::SUITE.iter().map(|k| k.name()).collect()
}

/// Returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (seed, count, out_dir, config_json=None))]
fn generate(py: Python<'_>, seed: u64, count: usize, out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = config(config_json)?;
    let m = py.detach(|| bench::cmd_generate(seed, count, &out_dir, &cfg)).map_err(err)?;
    serde_json::to_string(&m).map_err(err)
}

/// Returns the training summary as JSON.
#[pyfunction]
#[pyo3(signature = (data_dir, out_ckpt, config_json=None))]
fn train(py: Python<'_>, data_dir: PathBuf, out_ckpt: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = config(config_json)?;
    let s = py.detach(|| bench::cmd_train(&data_dir, &cfg, &out_ckpt)).map_err(err)?;
    serde_json::to_string(&s).map_err(err)
}

/// Returns the benchmark result as JSON and writes it to `out_json` when given.
#[pyfunction]
#[pyo3(signature = (ckpt, data_dir, corruptions="all", severities="1,2,3", seed=0, name="mapfuse", out_json=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    ckpt: PathBuf,
    data_dir: PathBuf,
    corruptions: &str,
    severities: &str,
    seed: u64,
    name: &str,
    out_json: Option<PathBuf>,
) -> PyResult<String> {
    let req = EvalRequest {
        checkpoint: ckpt,
        data: data_dir,
        corruptions: parse_kind_list(corruptions).map_err(err)?,
        severities: parse_severity_list(severities).map_err(err)?,
        seed,
        name: name.to_string(),
    };
    let r = py.detach(|| bench::cmd_eval(&req, out_json.as_deref())).map_err(err)?;
    Ok(r.to_json())
}

/// RS (and, with a baseline, RRS) tables as CSV or markdown.
#[pyfunction]
#[pyo3(signature = (result_json, baseline_json=None, format="md", svg=None))]
fn report(result_json: PathBuf, baseline_json: Option<PathBuf>, format: &str, svg: Option<PathBuf>) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(err)?;
    bench::cmd_report(&result_json, baseline_json.as_deref(), format, svg.as_deref()).map_err(err)
}

fn grid(acc: Vec<Vec<f64>>, acc_clean: f64) -> AccuracyGrid {
    let n = acc.first().map_or(0, Vec::len);
    AccuracyGrid {
        corruptions: CorruptionKind::SUITE.iter().copied().cycle().take(acc.len()).collect(),
        severities: (1..=n as u8).collect(),
        acc,
        acc_clean,
    }
}

/// Per-corruption RS and their mean, as ratios.
#[pyfunction]
fn resilience_scores(acc: Vec<Vec<f64>>, acc_clean: f64) -> PyResult<(Vec<f64>, f64)> {
    let r = metrics::resilience_scores(&grid(acc, acc_clean)).map_err(err)?;
    Ok((r.rs, r.m_rs))
}

/// Per-corruption RRS against a baseline grid and their mean, as ratios.
#[pyfunction]
fn relative_resilience(acc: Vec<Vec<f64>>, baseline: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let r = metrics::relative_resilience(&grid(acc, 1.0), &grid(baseline, 1.0)).map_err(err)?;
    Ok((r.rrs, r.m_rrs))
}

#[pyfunction]
#[pyo3(signature = (a, b, n_samples=metrics::CHAMFER_SAMPLES))]
fn chamfer_distance(a: Vec<[f64; 2]>, b: Vec<[f64; 2]>, n_samples: usize) -> PyResult<f64> {
    metrics::chamfer_distance(&a, &b, n_samples).map_err(err)
}

#[pymodule]
fn mapfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(resilience_scores, m)?)?;
    m.add_function(wrap_pyfunction!(relative_resilience, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    Ok(())
}
