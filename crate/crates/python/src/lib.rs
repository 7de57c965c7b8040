//! Python bindings for `bmx_core`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use bmx_core::calibration::{grid_search, GridSpec};
use bmx_core::evaluation::{self, CorrelationSpec, EvalOptions, Resampling};
use bmx_core::metrics::{builtin_metric, BridgeMetric, BridgeOptions, Endpoint, MetricKind};
use bmx_core::{
    Attribution, BmxParams, EvalInstance, ExplainerConfig, ExplainerKind, Format, Metric, MetricError, MetricRequest,
    Segment,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

fn core_err(e: bmx_core::Error) -> PyErr {
    if e.is_metric_error() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts any serializable value into plain Python objects.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Python callable `f(ground_truths: list[list[str]], hypothesis: list[str]) -> float`.
struct CallableMetric {
    name: String,
    f: Py<PyAny>,
}

impl Metric for CallableMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> MetricKind {
        MetricKind::External
    }

    fn single_flight(&self) -> bool {
        true
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Python::attach(|py| {
            let f = self.f.bind(py);
            chunk
                .iter()
                .map(|r| {
                    f.call1((r.ground_truths.clone(), r.hypothesis.clone()))
                        .and_then(|v| v.extract::<f64>())
                        .map_err(|e| MetricError::ChunkFailed {
                            chunk: 0,
                            message: e.to_string(),
                        })
                })
                .collect()
        })
    }
}

/// A builtin metric name, a bridge endpoint (`tcp://...`, `cmd:...`) or a callable.
fn open_metric(metric: &Bound<'_, PyAny>, timeout_ms: u64) -> PyResult<Box<dyn Metric>> {
    if let Ok(name) = metric.extract::<String>() {
        if name.starts_with("tcp://") || name.starts_with("cmd:") {
            let endpoint: Endpoint = name.parse().map_err(value_err)?;
            let options = BridgeOptions {
                timeout: std::time::Duration::from_millis(timeout_ms),
                ..BridgeOptions::default()
            };
            let bridge = BridgeMetric::connect(&endpoint, options).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            return Ok(Box::new(bridge));
        }
        return builtin_metric(&name).ok_or_else(|| PyValueError::new_err(format!("unknown metric `{name}`")));
    }
    if metric.is_callable() {
        let name = metric
            .getattr("__name__")
            .and_then(|n| n.extract::<String>())
            .unwrap_or_else(|_| "callable".into());
        return Ok(Box::new(CallableMetric {
            name,
            f: metric.clone().unbind(),
        }));
    }
    Err(PyValueError::new_err("metric must be a name, an endpoint or a callable"))
}

fn explainer_config(
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
) -> PyResult<ExplainerConfig> {
    let kind: ExplainerKind = explainer.parse().map_err(value_err)?;
    let mut config = ExplainerConfig::new(kind).with_seed(seed);
    if let Some(n) = samples {
        config = config.with_permutations(n);
    }
    if let Some(t) = replacement_token {
        config.replacement_token = t;
    }
    config.validate().map_err(core_err)?;
    Ok(config)
}

fn instance(ground_truths: Vec<String>, hypothesis: String) -> EvalInstance {
    EvalInstance {
        id: String::new(),
        system: String::new(),
        language_pair: String::new(),
        ground_truths: ground_truths.into_iter().map(Segment::new).collect(),
        hypothesis: Segment::new(hypothesis),
        human_scores: BTreeMap::new(),
    }
}

fn parse_specs(specs: &[String]) -> PyResult<Vec<CorrelationSpec>> {
    specs.iter().map(|s| s.parse().map_err(value_err)).collect()
}

#[pyclass(module = "bmx", frozen)]
struct Dataset {
    inner: bmx_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads JSONL or TSV; the format follows the extension unless given.
    #[staticmethod]
    #[pyo3(signature = (path, format=None))]
    fn load(path: PathBuf, format: Option<&str>) -> PyResult<Self> {
        let format = match format {
            Some(f) => f.parse::<Format>().map_err(value_err)?,
            None if path.extension().is_some_and(|e| e == "tsv") => Format::Tsv,
            None => Format::Jsonl,
        };
        let inner = bmx_core::load_dataset(&path, format).map_err(core_err)?;
        Ok(Dataset { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.instances.iter().map(|i| i.id.clone()).collect()
    }

    fn subset(&self, ids: Vec<String>) -> Self {
        Dataset {
            inner: self.inner.subset(&ids),
        }
    }

    /// `[(calibration_ids, evaluation_ids), ...]`, grouped by source text.
    #[pyo3(signature = (folds=8, seed=0))]
    fn splits(&self, folds: usize, seed: u64) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
        let plan = bmx_core::make_splits(&self.inner, folds, seed).map_err(core_err)?;
        Ok(plan
            .folds
            .into_iter()
            .map(|f| (f.calibration_ids, f.evaluation_ids))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(name={:?}, instances={})", self.inner.name, self.inner.len())
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    bmx_core::tokenize(text).into_iter().map(|t| t.text).collect()
}

#[pyfunction]
fn regularize(values: Vec<f64>) -> Vec<f64> {
    bmx_core::regularize(&values)
}

#[pyfunction]
fn power_mean(values: Vec<f64>, p: f64) -> PyResult<f64> {
    bmx_core::power_mean(&values, p).map_err(core_err)
}

/// Power mean of the regularized, concatenated per-segment importances.
#[pyfunction]
fn aggregate(per_segment: Vec<Vec<f64>>, p: f64) -> PyResult<f64> {
    let attribution = Attribution {
        base_score: 0.0,
        per_segment,
    };
    bmx_core::aggregate(&attribution, p).map_err(core_err)
}

#[pyfunction]
fn combine(w: f64, s0: f64, s_hat: f64) -> f64 {
    bmx_core::boost::combine(w, s0, s_hat)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evaluation::pearson(&x, &y).map_err(core_err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evaluation::spearman(&x, &y).map_err(core_err)
}

#[pyfunction]
fn kendall(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evaluation::kendall(&x, &y).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (p_values, family_size=None))]
fn bonferroni(p_values: Vec<f64>, family_size: Option<usize>) -> PyResult<Vec<bool>> {
    let m = family_size.unwrap_or(p_values.len());
    evaluation::bonferroni(&p_values, m).map_err(core_err)
}

/// p-value that `boosted` correlates with `human` no better than `original`.
#[pyfunction]
#[pyo3(signature = (original, boosted, human, coefficient="pearson", resamples=1000, seed=0, exact=false))]
fn permute_both_test(
    original: Vec<f64>,
    boosted: Vec<f64>,
    human: Vec<f64>,
    coefficient: &str,
    resamples: usize,
    seed: u64,
    exact: bool,
) -> PyResult<f64> {
    let coefficient: evaluation::Coefficient = coefficient.parse().map_err(core_err)?;
    let mode = if exact {
        Resampling::Exact
    } else {
        Resampling::Random { resamples, seed }
    };
    evaluation::permute_both_test(&original, &boosted, &human, coefficient, mode).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (metric, ground_truths, hypothesis, *, explainer="erasure", samples=None, seed=0, replacement_token=None, timeout_ms=60_000))]
#[allow(clippy::too_many_arguments)]
fn explain(
    py: Python<'_>,
    metric: &Bound<'_, PyAny>,
    ground_truths: Vec<String>,
    hypothesis: String,
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
    timeout_ms: u64,
) -> PyResult<Py<PyAny>> {
    let metric = open_metric(metric, timeout_ms)?;
    let config = explainer_config(explainer, samples, seed, replacement_token)?;
    let inst = instance(ground_truths, hypothesis);
    let attribution = py
        .detach(|| bmx_core::explain(metric.as_ref(), &inst, &config))
        .map_err(core_err)?;
    to_py(py, &attribution)
}

#[pyfunction]
#[pyo3(signature = (metric, ground_truths, hypothesis, p, w, *, explainer="erasure", samples=None, seed=0, replacement_token=None, iterations=1, timeout_ms=60_000))]
#[allow(clippy::too_many_arguments)]
fn boost(
    py: Python<'_>,
    metric: &Bound<'_, PyAny>,
    ground_truths: Vec<String>,
    hypothesis: String,
    p: f64,
    w: f64,
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
    iterations: usize,
    timeout_ms: u64,
) -> PyResult<Py<PyAny>> {
    let metric = open_metric(metric, timeout_ms)?;
    let config = explainer_config(explainer, samples, seed, replacement_token)?;
    let params = BmxParams::new(p, w, config).with_iterations(iterations);
    let inst = instance(ground_truths, hypothesis);
    let scored = py
        .detach(|| bmx_core::boost(metric.as_ref(), &inst, &params))
        .map_err(core_err)?;
    to_py(py, &scored)
}

#[pyfunction]
#[pyo3(signature = (metric, dataset, p, w, *, explainer="erasure", samples=None, seed=0, replacement_token=None, iterations=1, jobs=0, timeout_ms=60_000))]
#[allow(clippy::too_many_arguments)]
fn boost_dataset(
    py: Python<'_>,
    metric: &Bound<'_, PyAny>,
    dataset: &Dataset,
    p: f64,
    w: f64,
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
    iterations: usize,
    jobs: usize,
    timeout_ms: u64,
) -> PyResult<Py<PyAny>> {
    let metric = open_metric(metric, timeout_ms)?;
    let config = explainer_config(explainer, samples, seed, replacement_token)?;
    let params = BmxParams::new(p, w, config).with_iterations(iterations);
    let scored = py
        .detach(|| bmx_core::boost_dataset(metric.as_ref(), &dataset.inner, &params, jobs))
        .map_err(core_err)?;
    to_py(py, &scored)
}

/// Grid search over p and w; returns the selected parameters and every improving cell.
#[pyfunction]
#[pyo3(signature = (metric, dataset, objectives, *, explainer="erasure", samples=None, seed=0, replacement_token=None, p_count=600, w_count=6, jobs=0, timeout_ms=60_000))]
#[allow(clippy::too_many_arguments)]
fn calibrate(
    py: Python<'_>,
    metric: &Bound<'_, PyAny>,
    dataset: &Dataset,
    objectives: Vec<String>,
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
    p_count: usize,
    w_count: usize,
    jobs: usize,
    timeout_ms: u64,
) -> PyResult<Py<PyAny>> {
    let metric = open_metric(metric, timeout_ms)?;
    let config = explainer_config(explainer, samples, seed, replacement_token)?;
    let objectives = parse_specs(&objectives)?;
    let grid = GridSpec::with_counts(p_count, w_count);
    let result = py
        .detach(|| grid_search(metric.as_ref(), &dataset.inner, &config, &grid, &objectives, jobs))
        .map_err(core_err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (metric, dataset, p, w, specs, *, explainer="erasure", samples=None, seed=0, replacement_token=None, resamples=1000, family_size=None, jobs=0, timeout_ms=60_000))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    metric: &Bound<'_, PyAny>,
    dataset: &Dataset,
    p: f64,
    w: f64,
    specs: Vec<String>,
    explainer: &str,
    samples: Option<usize>,
    seed: u64,
    replacement_token: Option<String>,
    resamples: usize,
    family_size: Option<usize>,
    jobs: usize,
    timeout_ms: u64,
) -> PyResult<Py<PyAny>> {
    let metric = open_metric(metric, timeout_ms)?;
    let config = explainer_config(explainer, samples, seed, replacement_token)?;
    let params = BmxParams::new(p, w, config);
    let specs = parse_specs(&specs)?;
    let options = EvalOptions {
        resamples,
        seed,
        family_size,
        jobs,
    };
    let report = py
        .detach(|| evaluation::evaluate(metric.as_ref(), &dataset.inner, &params, &specs, &options))
        .map_err(core_err)?;
    to_py(py, &report)
}

#[pymodule]
pub fn bmx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(regularize, m)?)?;
    m.add_function(wrap_pyfunction!(power_mean, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(kendall, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni, m)?)?;
    m.add_function(wrap_pyfunction!(permute_both_test, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(boost, m)?)?;
    m.add_function(wrap_pyfunction!(boost_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
