//! Python bindings: consistency matrices, channel matching, learned
//! transforms, overlap/distance analysis and the distillation lab.
//!
//! Feature matrices cross the boundary as lists of rows (`list[list[float]]`).

use std::path::PathBuf;

use kcd_core::activations::{read_matrix_npy, write_matrix_npy};
use kcd_core::analysis::{channel_overlap, class_average_activations, feature_distance_report};
use kcd_core::consistency::{self, ConsistencyMetric, MetricKind};
use kcd_core::lab::{run_algorithm1, RunConfig};
use kcd_core::learned::{self, FitConfig};
use kcd_core::matching::{self, Strategy};
use kcd_core::{global_average_pool, read_npy, KcdError as CoreError, Matrix, PooledActivations};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pykcd, KcdError, PyException, "Raised for every kcd failure; message starts with the category.");

fn err(e: CoreError) -> PyErr {
    KcdError::new_err(format!("{}: {e}", e.category()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn pooled(rows: Vec<Vec<f64>>) -> PyResult<PooledActivations> {
    PooledActivations::from_matrix(matrix(rows)?).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn metric(name: &str, epsilon: f64) -> PyResult<ConsistencyMetric> {
    let kind: MetricKind = name.parse().map_err(err)?;
    ConsistencyMetric::new(kind, epsilon).map_err(err)
}

#[pyclass(name = "ConsistencyMatrix", module = "pykcd", frozen)]
pub struct PyConsistencyMatrix {
    inner: consistency::ConsistencyMatrix,
}

#[pymethods]
impl PyConsistencyMatrix {
    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn metric(&self) -> String {
        self.inner.metric.kind.to_string()
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.inner.sample_count
    }

    fn values(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.m)
    }

    /// Γ under `transform`, or the trace when it is omitted.
    #[pyo3(signature = (transform=None))]
    fn score(&self, transform: Option<PyRef<'_, PyTransformation>>) -> PyResult<f64> {
        consistency::consistency_score(&self.inner, transform.as_ref().map(|t| &t.inner)).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConsistencyMatrix { inner: consistency::ConsistencyMatrix::load(&path).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("ConsistencyMatrix(channels={}, metric={})", self.inner.channels(), self.inner.metric.kind)
    }
}

#[pyclass(name = "Transformation", module = "pykcd", frozen)]
pub struct PyTransformation {
    inner: matching::Transformation,
}

#[pymethods]
impl PyTransformation {
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.provenance.strategy.clone()
    }

    /// Teacher channel feeding each student channel, for index-map kinds.
    fn index_map(&self) -> Option<Vec<usize>> {
        self.inner.index_map()
    }

    /// Transform pooled teacher features given as rows.
    fn apply(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = pooled(features)?;
        Ok(rows(self.inner.apply(&x).map_err(err)?.matrix()))
    }

    fn inverse(&self) -> PyResult<Self> {
        Ok(PyTransformation { inner: self.inner.inverse().map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTransformation { inner: matching::Transformation::load(&path).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Transformation(kind={}, channels={})", self.inner.kind().name(), self.inner.channels())
    }
}

/// Consistency matrix between teacher and student features (rows are samples).
#[pyfunction]
#[pyo3(signature = (teacher, student, metric="correlation", epsilon=consistency::DEFAULT_EPSILON))]
fn consistency_matrix(
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    metric: &str,
    epsilon: f64,
) -> PyResult<PyConsistencyMatrix> {
    let m = consistency::consistency_matrix(&pooled(teacher)?, &pooled(student)?, self::metric(metric, epsilon)?)
        .map_err(err)?;
    Ok(PyConsistencyMatrix { inner: m })
}

#[pyfunction]
fn match_greedy(m: PyRef<'_, PyConsistencyMatrix>) -> PyResult<PyTransformation> {
    Ok(PyTransformation { inner: matching::match_greedy(&m.inner).map_err(err)? })
}

#[pyfunction]
fn match_bipartite(m: PyRef<'_, PyConsistencyMatrix>) -> PyResult<PyTransformation> {
    Ok(PyTransformation { inner: matching::match_bipartite(&m.inner).map_err(err)? })
}

#[pyfunction]
fn match_random(channels: usize, seed: u64) -> PyResult<PyTransformation> {
    Ok(PyTransformation { inner: matching::match_random(channels, seed).map_err(err)? })
}

/// Derive a transform with a named strategy: identity, random, greedy or bipartite.
#[pyfunction]
#[pyo3(signature = (m, strategy, seed=0))]
fn derive_transform(m: PyRef<'_, PyConsistencyMatrix>, strategy: &str, seed: u64) -> PyResult<PyTransformation> {
    let s: Strategy = strategy.parse().map_err(err)?;
    Ok(PyTransformation { inner: matching::derive_from_matrix(&m.inner, s, seed).map_err(err)? })
}

/// Ridge-regression transform; returns `(transform, squared Frobenius residual)`.
#[pyfunction]
#[pyo3(signature = (teacher, student, ridge_lambda=1e-6))]
fn fit_linear_transform(
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    ridge_lambda: f64,
) -> PyResult<(PyTransformation, f64)> {
    let cfg = FitConfig { ridge_lambda, ..FitConfig::default() };
    let fit = learned::fit_linear_transform(&pooled(teacher)?, &pooled(student)?, &cfg).map_err(err)?;
    Ok((PyTransformation { inner: fit.transform }, fit.residual))
}

/// Residual-block transform; returns `(transform, per-epoch MSE curve)`.
#[pyfunction]
#[pyo3(signature = (teacher, student, lr=1e-2, epochs=500, hidden=None, seed=0))]
fn fit_residual_transform(
    py: Python<'_>,
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    lr: f64,
    epochs: usize,
    hidden: Option<usize>,
    seed: u64,
) -> PyResult<(PyTransformation, Vec<f64>)> {
    let cfg = FitConfig { lr, epochs, hidden, seed, ..FitConfig::default() };
    let (t, s) = (pooled(teacher)?, pooled(student)?);
    let fit = py.detach(|| learned::fit_residual_transform(&t, &s, &cfg)).map_err(err)?;
    Ok((PyTransformation { inner: fit.transform }, fit.loss_curve))
}

/// Mean top-k overlap of class-averaged activations, as a dict.
#[pyfunction]
fn channel_overlap_ratio<'py>(
    py: Python<'py>,
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    labels: Vec<i64>,
    k: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let pt = class_average_activations(&pooled(teacher)?, &labels).map_err(err)?;
    let ps = class_average_activations(&pooled(student)?, &labels).map_err(err)?;
    let rep = channel_overlap(&pt, &ps, &k).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("k", rep.k_values)?;
    d.set_item("mean_overlap", rep.mean_overlap)?;
    d.set_item("classes", rep.classes)?;
    d.set_item("per_class", rep.per_class)?;
    Ok(d)
}

/// `(mean L2 distance, mean KL divergence)` between paired feature rows.
#[pyfunction]
fn feature_distance(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let r = feature_distance_report(&pooled(teacher)?, &pooled(student)?).map_err(err)?;
    Ok((r.mean_l2, r.mean_kl))
}

/// Read an activation tensor and global-average-pool it to rows.
#[pyfunction]
fn pool_npy(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let t = read_npy(&path).map_err(err)?;
    Ok(rows(global_average_pool(&t).matrix()))
}

#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&read_matrix_npy(&path).map_err(err)?))
}

#[pyfunction]
fn write_matrix(path: PathBuf, values: Vec<Vec<f64>>) -> PyResult<()> {
    write_matrix_npy(&matrix(values)?, &path).map_err(err)
}

/// The reference toy run configuration as TOML.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn reference_config(seed: u64) -> String {
    RunConfig::reference(seed).to_toml()
}

/// Run the full distillation procedure from a TOML configuration; returns the report as JSON.
#[pyfunction]
fn run_distillation(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(err)?;
    let report = py.detach(|| run_algorithm1(&cfg)).map_err(err)?;
    Ok(report.to_json())
}

#[pymodule]
pub fn pykcd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("KcdError", m.py().get_type::<KcdError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConsistencyMatrix>()?;
    m.add_class::<PyTransformation>()?;
    m.add_function(wrap_pyfunction!(consistency_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(match_greedy, m)?)?;
    m.add_function(wrap_pyfunction!(match_bipartite, m)?)?;
    m.add_function(wrap_pyfunction!(match_random, m)?)?;
    m.add_function(wrap_pyfunction!(derive_transform, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear_transform, m)?)?;
    m.add_function(wrap_pyfunction!(fit_residual_transform, m)?)?;
    m.add_function(wrap_pyfunction!(channel_overlap_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(feature_distance, m)?)?;
    m.add_function(wrap_pyfunction!(pool_npy, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(reference_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_distillation, m)?)?;
    Ok(())
}
