//! Python bindings: the transport solver, the episode heads, dataset
//! generation and loading, checkpoint embedding and the command line.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use fsqs::backbone::{load_checkpoint, BackboneParams, BnMode};
use fsqs::data::{generate_synthetic, GridDataset, ShiftGenerator};
use fsqs::learners::{
    compute_prototypes, matchingnet_posterior, protonet_posterior, transport_support, LabeledEmbeddings,
    TransportConfig,
};
use fsqs::ot::{self, CostMatrix, MarginalWeights, SinkhornConfig};

create_exception!(fsqs_py, FsqsError, PyException);

type Rows = Vec<Vec<f64>>;

fn err(e: fsqs::Error) -> PyErr {
    FsqsError::new_err(e.to_string())
}

fn matrix(rows: Rows, what: &str) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(FsqsError::new_err(format!("{what}: rows have different lengths")));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| FsqsError::new_err(format!("{what}: {e}")))
}

fn rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn labeled(support: Rows, labels: Vec<usize>, n_classes: Option<usize>) -> PyResult<LabeledEmbeddings> {
    let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledEmbeddings::new(matrix(support, "support")?, labels, n_classes).map_err(err)
}

fn sinkhorn_config(epsilon: f64, max_iters: usize, tol: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iters,
        tol,
    }
}

/// Entropic OT plan between uniform (or given) marginals.
///
/// Returns a dict with `plan`, `feasibility_error`, `iterations`, `converged`.
#[pyfunction]
#[pyo3(signature = (cost, epsilon = 0.05, max_iters = 1000, tol = 1e-9, source_weights = None, target_weights = None))]
fn sinkhorn(
    py: Python<'_>,
    cost: Rows,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
    source_weights: Option<Vec<f64>>,
    target_weights: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let cost = CostMatrix::new(matrix(cost, "cost")?).map_err(err)?;
    let marginals = match (source_weights, target_weights) {
        (None, None) => MarginalWeights::uniform(cost.n_source(), cost.n_target()),
        (Some(a), Some(b)) => MarginalWeights::new(a.into(), b.into()).map_err(err)?,
        _ => return Err(FsqsError::new_err("give both marginals or neither")),
    };
    let plan = ot::sinkhorn(&cost, &marginals, &sinkhorn_config(epsilon, max_iters, tol)).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("plan", rows(&plan.values))?;
    out.set_item("feasibility_error", plan.feasibility_error)?;
    out.set_item("iterations", plan.iterations)?;
    out.set_item("converged", plan.converged)?;
    Ok(out.into_any().unbind())
}

/// Squared Euclidean cost between two point sets.
#[pyfunction]
fn cost_matrix(source: Rows, target: Rows) -> PyResult<Rows> {
    let c = ot::cost_matrix(matrix(source, "source")?.view(), matrix(target, "target")?.view()).map_err(err)?;
    Ok(rows(c.values()))
}

/// Move the support onto the query by the barycentric map of the OT plan.
/// Returns `(moved_support, row_normalized_plan)`.
#[pyfunction]
#[pyo3(signature = (support, queries, epsilon = 0.05))]
fn transport(support: Rows, queries: Rows, epsilon: f64) -> PyResult<(Rows, Rows)> {
    let n = support.len();
    let s = LabeledEmbeddings::new(matrix(support, "support")?, vec![0; n], 1).map_err(err)?;
    let q = matrix(queries, "queries")?;
    let config = TransportConfig {
        sinkhorn: SinkhornConfig::with_epsilon(epsilon),
        ..TransportConfig::default()
    };
    let (moved, _, plan) = transport_support(&s, q.view(), &config).map_err(err)?;
    Ok((rows(moved.embeddings()), rows(&plan)))
}

/// Class posteriors of the queries under one of the episode heads:
/// `protonet`, `matchingnet` or `tp` (prototypes of the transported support).
#[pyfunction]
#[pyo3(signature = (support, labels, queries, head = "protonet", n_classes = None, epsilon = 0.05))]
fn posterior(
    support: Rows,
    labels: Vec<usize>,
    queries: Rows,
    head: &str,
    n_classes: Option<usize>,
    epsilon: f64,
) -> PyResult<Rows> {
    let s = labeled(support, labels, n_classes)?;
    let q = matrix(queries, "queries")?;
    let post = match head {
        "protonet" => protonet_posterior(&compute_prototypes(&s).map_err(err)?, q.view()),
        "matchingnet" => matchingnet_posterior(&s, q.view()),
        "tp" => fsqs::learners::transported_prototypes_posterior(&s, q.view(), &SinkhornConfig::with_epsilon(epsilon))
            .map(|(p, _)| p),
        other => return Err(FsqsError::new_err(format!("unknown head `{other}`"))),
    }
    .map_err(err)?;
    Ok(rows(post.probs()))
}

/// Mean and 95% half-width over per-episode accuracies.
#[pyfunction]
fn mean_and_ci(values: Vec<f64>) -> (f64, f64) {
    fsqs::eval::mean_and_ci(&values)
}

/// A class x domain dataset on disk or in memory.
#[pyclass(frozen)]
struct Dataset {
    inner: GridDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GridDataset::load(&dir).map_err(err)?,
        })
    }

    /// Synthetic translation-shift grid; keyword arguments override the defaults.
    #[staticmethod]
    #[pyo3(signature = (items_per_cell = 64, seed = 0, classes = 20, domains = 8, dim = 8, translation = 10.0))]
    fn synthetic(
        items_per_cell: usize,
        seed: u64,
        classes: usize,
        domains: usize,
        dim: usize,
        translation: f64,
    ) -> PyResult<Self> {
        let g = ShiftGenerator {
            class_count: classes,
            domain_count: domains,
            d_in: dim,
            translation,
            ..ShiftGenerator::default()
        };
        Ok(Self {
            inner: generate_synthetic(&g, items_per_cell, seed).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.d_in()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn domains(&self) -> usize {
        self.inner.domain_count()
    }

    /// Items of one cell as rows of floats.
    fn cell(&self, domain: usize, class: usize) -> PyResult<Rows> {
        let c = self.inner.cell(domain, class).map_err(err)?;
        Ok(c.rows().into_iter().map(|r| r.iter().map(|v| f64::from(*v)).collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} classes x {} domains, dim {})",
            self.inner.class_count(),
            self.inner.domain_count(),
            self.inner.d_in()
        )
    }
}

/// A trained feature extractor.
#[pyclass(frozen)]
struct Backbone {
    inner: BackboneParams,
}

#[pymethods]
impl Backbone {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    /// Embed a batch; `bn` is `cbn` (running statistics) or `tbn` (batch statistics).
    #[pyo3(signature = (batch, bn = "cbn"))]
    fn embed(&self, batch: Rows, bn: &str) -> PyResult<Rows> {
        let mode = match bn {
            "cbn" => BnMode::Conventional,
            "tbn" => BnMode::Transductive,
            other => return Err(FsqsError::new_err(format!("unknown bn mode `{other}`"))),
        };
        let z = self.inner.embed(matrix(batch, "batch")?.view(), mode).map_err(err)?;
        Ok(rows(&z))
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes()
    }
}

/// Run the `fsqs` command line with `args` (without the program name) and
/// return its exit code.
#[pyfunction]
fn main(args: Vec<String>) -> i32 {
    fsqs::cli::run(std::iter::once("fsqs".to_string()).chain(args))
}

#[pymodule]
fn fsqs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FsqsError", m.py().get_type::<FsqsError>())?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(cost_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(transport, m)?)?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(mean_and_ci, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Backbone>()?;
    Ok(())
}
