//! Python bindings: noise injection, the mini-group sampler, loss values,
//! metrics and the experiment runner. Structured results come back as JSON
//! strings.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use noisemix::config::ExperimentConfig;
use noisemix::dataset::{CorruptionRecord, NoiseKind, SymmetricConvention};
use noisemix::error::Error;
use noisemix::losses::{self, ContrastiveBatch, UncertaintyWeights};
use noisemix::noise;
use noisemix::sampler::{GroupingMode, MgbsSampler, RemainderPolicy};
use noisemix::{evaluation, experiment};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Row-stochastic label transition matrix.
#[pyclass(name = "TransitionMatrix", frozen)]
struct PyTransitionMatrix {
    inner: noise::TransitionMatrix,
}

#[pymethods]
impl PyTransitionMatrix {
    #[staticmethod]
    #[pyo3(signature = (rate, num_classes, convention = "uniform_all"))]
    fn symmetric(rate: f64, num_classes: usize, convention: &str) -> PyResult<Self> {
        let conv: SymmetricConvention = parse(convention)?;
        Ok(Self { inner: noise::build_symmetric_matrix(rate, num_classes, conv).map_err(py_err)? })
    }

    #[staticmethod]
    fn asymmetric(rate: f64, num_classes: usize) -> PyResult<Self> {
        Ok(Self { inner: noise::build_asymmetric_matrix(rate, num_classes).map_err(py_err)? })
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().to_vec()
    }

    fn expected_noise_rate(&self) -> f64 {
        self.inner.expected_noise_rate()
    }

    /// Corrupts `labels`; returns the given labels.
    fn apply(&self, labels: Vec<usize>, seed: u64) -> PyResult<Vec<usize>> {
        let recs = noise::apply_transition(&labels, &self.inner, seed).map_err(py_err)?;
        Ok(recs.into_iter().map(|r| r.given_label).collect())
    }
}

/// Corrupts clean labels; returns `(given_labels, realized_rate)`.
#[pyfunction]
#[pyo3(signature = (labels, num_classes, kind, rate, convention = "uniform_all", seed = 0))]
fn inject_labels(
    labels: Vec<usize>,
    num_classes: usize,
    kind: &str,
    rate: f64,
    convention: &str,
    seed: u64,
) -> PyResult<(Vec<usize>, f64)> {
    let kind: NoiseKind = parse(kind)?;
    let (h, recs) = noise::inject_labels(&labels, num_classes, kind, rate, parse(convention)?, seed).map_err(py_err)?;
    Ok((recs.into_iter().map(|r| r.given_label).collect(), h.realized_rate))
}

/// Mini-group batch sampler over given labels.
#[pyclass(name = "MgbsSampler", frozen)]
struct PyMgbsSampler {
    inner: MgbsSampler,
}

#[pymethods]
impl PyMgbsSampler {
    #[new]
    #[pyo3(signature = (labels, group_size, groups_per_batch, seed = 0, remainder = "resample", grouping = "intra_class"))]
    fn new(
        labels: Vec<usize>,
        group_size: usize,
        groups_per_batch: usize,
        seed: u64,
        remainder: &str,
        grouping: &str,
    ) -> PyResult<Self> {
        let policy = match remainder {
            "drop" => RemainderPolicy::Drop,
            "resample" => RemainderPolicy::Resample,
            other => return Err(PyValueError::new_err(format!("unknown remainder policy {other:?}"))),
        };
        let mode = match grouping {
            "intra_class" => GroupingMode::IntraClass,
            "inter_class" => GroupingMode::InterClass,
            other => return Err(PyValueError::new_err(format!("unknown grouping {other:?}"))),
        };
        let recs: Vec<CorruptionRecord> = labels.iter().enumerate().map(|(i, &l)| CorruptionRecord::clean(i, l)).collect();
        let inner = MgbsSampler::new(&recs, group_size, groups_per_batch, seed, policy, mode).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Batches of one epoch as `[batch][group][member]` indices.
    fn epoch(&self, epoch: usize) -> PyResult<Vec<Vec<Vec<usize>>>> {
        let batches = self.inner.epoch(epoch).map_err(py_err)?;
        Ok(batches.into_iter().map(|b| b.groups.into_iter().map(|g| g.members).collect()).collect())
    }
}

/// Contrastive loss of interleaved view embeddings; returns `(sum, mean)`.
#[pyfunction]
#[pyo3(signature = (embeddings, temperature = 0.5, include_positive = false))]
fn contrastive_loss(embeddings: Vec<Vec<f64>>, temperature: f64, include_positive: bool) -> PyResult<(f64, f64)> {
    let mut batch = ContrastiveBatch::new(matrix(embeddings)?, temperature).map_err(py_err)?;
    batch.include_positive_in_denominator = include_positive;
    let v = losses::contrastive_loss(&batch).map_err(py_err)?;
    Ok((v.sum, v.mean))
}

/// Weighted mixture of a group's rows.
#[pyfunction]
fn mixup(rows: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let m = matrix(rows)?;
    Ok(losses::mixup_features(m.view(), Array1::from(weights).view()).map_err(py_err)?.to_vec())
}

#[pyfunction]
fn decision_loss(l_mixup: f64, l_supervised: f64, sigma_mixup: f64, sigma_supervised: f64) -> PyResult<f64> {
    losses::decision_loss(l_mixup, l_supervised, UncertaintyWeights { sigma_mixup, sigma_supervised }).map_err(py_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    evaluation::roc_auc(&scores, &positive).map_err(py_err)
}

/// Accuracy, per-class metrics and confusion matrix as JSON.
#[pyfunction]
#[pyo3(signature = (predicted, truth, num_classes, probabilities = None))]
fn classification_report(
    predicted: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
    probabilities: Option<Vec<Vec<f64>>>,
) -> PyResult<String> {
    let probs = probabilities.map(matrix).transpose()?;
    to_json(&evaluation::classification_report(&predicted, &truth, probs.as_ref(), num_classes).map_err(py_err)?)
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

/// Runs an experiment from TOML text and returns the run report as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, output = None))]
fn run_experiment(py: Python<'_>, config_toml: &str, output: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_toml(config_toml).map_err(py_err)?;
    if let Some(o) = output {
        cfg.output = o;
    }
    let report = py.detach(|| experiment::run_experiment(&cfg)).map_err(py_err)?;
    to_json(&report)
}

/// Re-scores a run directory; returns the evaluation summary as JSON.
#[pyfunction]
fn evaluate_run(py: Python<'_>, run_dir: PathBuf) -> PyResult<String> {
    to_json(&py.detach(|| experiment::evaluate_run(&run_dir)).map_err(py_err)?)
}

#[pymodule]
fn noisemix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransitionMatrix>()?;
    m.add_class::<PyMgbsSampler>()?;
    m.add_function(wrap_pyfunction!(inject_labels, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mixup, m)?)?;
    m.add_function(wrap_pyfunction!(decision_loss, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    Ok(())
}
