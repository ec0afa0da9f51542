//! Python bindings for the quadratic-linear network toolkit.
//!
//! Exposes the dataset generators, the model containers, the trainers, the
//! convex certification oracle, and the landscape classifier. Matrices cross
//! the boundary as nested `list[list[float]]` (row-major), vectors as
//! `list[float]`.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qlnet_core::data as core_data;
use qlnet_core::harness;
use qlnet_core::landscape;
use qlnet_core::model;
use qlnet_core::objective;
use qlnet_core::optimize;
use qlnet_core::oracle;

fn err(e: qlnet_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_out(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Training data: inputs (N × d) and targets (N × M).
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: core_data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        matrix_out(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        matrix_out(&self.inner.y)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn outputs(&self) -> usize {
        self.inner.outputs()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: core_data::Dataset::from_json(text).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, d={}, outputs={}, generator={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.outputs(),
            self.inner.meta.generator
        )
    }
}

/// One quadratic layer: weights `q` (d × k), output weights `lam` (M × k),
/// norm-regressor coefficients `alpha` (M).
#[pyclass(name = "QLLayer", from_py_object)]
#[derive(Clone)]
struct PyQLLayer {
    inner: model::QLLayer,
}

#[pymethods]
impl PyQLLayer {
    #[new]
    fn new(q: Vec<Vec<f64>>, lam: Vec<Vec<f64>>, alpha: Vec<f64>) -> PyResult<Self> {
        let layer =
            model::QLLayer::new(to_matrix(q)?, to_matrix(lam)?, Array1::from_vec(alpha))
                .map_err(err)?;
        Ok(PyQLLayer { inner: layer })
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        matrix_out(&self.inner.q)
    }

    #[getter]
    fn lam(&self) -> Vec<Vec<f64>> {
        matrix_out(&self.inner.lambda)
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.to_vec()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Array1::from_vec(x);
        Ok(self.inner.forward(&x.view()).map_err(err)?.to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "QLLayer(d={}, k={}, outputs={})",
            self.inner.input_dim(),
            self.inner.neurons(),
            self.inner.outputs()
        )
    }
}

/// Any trainable network (single / deep / polynomial).
#[pyclass(name = "Network", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: model::Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn single(layer: PyQLLayer) -> Self {
        PyNetwork { inner: model::Network::Single(layer.inner) }
    }

    /// Random depth-L network; `widths` = [h0, …, hL], hidden widths default
    /// to the overparameterized schedule `m_l = h_{l-1}·h_l`.
    #[staticmethod]
    #[pyo3(signature = (widths, seed, hidden=None))]
    fn deep_random(widths: Vec<usize>, seed: u64, hidden: Option<Vec<usize>>) -> PyResult<Self> {
        let hidden = hidden.unwrap_or_else(|| model::deep_width_schedule(&widths));
        let arch = optimize::NetworkArch::Deep { widths, hidden };
        let net = optimize::initialize(&arch, &optimize::InitScheme::default(), seed).map_err(err)?;
        Ok(PyNetwork { inner: net })
    }

    /// Polynomial layer with the prescribed basis initialization and λ = 0.
    #[staticmethod]
    fn poly_basis(d: usize, degree: u32) -> PyResult<Self> {
        let q = model::poly_basis_init(d, degree).map_err(err)?;
        let k = q.ncols();
        let layer = model::PolyLayer::new(degree, q, Array1::zeros(k)).map_err(err)?;
        Ok(PyNetwork { inner: model::Network::Poly(layer) })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant_tag()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Array1::from_vec(x);
        Ok(self.inner.predict(&x.view()).map_err(err)?.to_vec())
    }

    /// The single-layer view, when this network is a single QL layer.
    fn as_single(&self) -> PyResult<PyQLLayer> {
        match &self.inner {
            model::Network::Single(l) => Ok(PyQLLayer { inner: l.clone() }),
            _ => Err(PyValueError::new_err("not a single-layer network")),
        }
    }

    fn to_checkpoint_json(&self, seed: u64) -> PyResult<String> {
        model::Checkpoint { seed, network: self.inner.clone() }.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_checkpoint_json(text: &str) -> PyResult<Self> {
        Ok(PyNetwork { inner: model::Checkpoint::from_json(text).map_err(err)?.network })
    }
}

/// Globally optimal solution of the lifted least-squares problem.
#[pyclass(name = "OracleSolution", skip_from_py_object)]
#[derive(Clone)]
struct PyOracleSolution {
    inner: oracle::OracleSolution,
}

#[pymethods]
impl PyOracleSolution {
    #[getter]
    fn loss_star(&self) -> f64 {
        self.inner.loss_star
    }

    #[getter]
    fn residual_norm(&self) -> f64 {
        self.inner.residual_norm
    }

    #[getter]
    fn rank_deficient(&self) -> bool {
        self.inner.rank_deficient
    }

    #[getter]
    fn coefficient_matrix(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.a.as_ref().map(matrix_out)
    }

    #[getter]
    fn alpha_star(&self) -> Option<f64> {
        self.inner.alpha_star
    }

    fn predict(&self, x: Vec<f64>) -> f64 {
        let x = Array1::from_vec(x);
        self.inner.predict(&x.view())
    }

    fn nmse_star(&self, data: &PyDataset) -> PyResult<f64> {
        self.inner.nmse_star(&data.inner).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

/// Outcome of a training run.
#[pyclass(name = "TrainResult", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainResult {
    #[pyo3(get)]
    final_loss: f64,
    #[pyo3(get)]
    final_grad_norm: f64,
    #[pyo3(get)]
    epochs_used: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    diverged: bool,
    #[pyo3(get)]
    model: PyNetwork,
}

#[pyfunction]
fn gen_planted_diagonal(d: usize, n: usize, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: core_data::gen_planted_diagonal(d, n, seed).map_err(err)? })
}

#[pyfunction]
fn gen_planted_dense(d: usize, n: usize, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: core_data::gen_planted_dense(d, n, seed).map_err(err)? })
}

#[pyfunction]
fn gen_independent(d: usize, n: usize, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: core_data::gen_independent(d, n, seed).map_err(err)? })
}

#[pyfunction]
fn gen_deep_planted(d: usize, h1: usize, n: usize, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: core_data::gen_deep_planted(d, h1, n, seed).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (data, degree=2, include_norm=false))]
fn solve_oracle(data: &PyDataset, degree: u32, include_norm: bool) -> PyResult<PyOracleSolution> {
    Ok(PyOracleSolution {
        inner: oracle::solve_oracle(&data.inner, degree, include_norm).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (data, include_norm=false))]
fn closed_form_solver(data: &PyDataset, include_norm: bool) -> PyResult<PyQLLayer> {
    Ok(PyQLLayer { inner: oracle::closed_form_solver(&data.inner, include_norm).map_err(err)? })
}

#[pyfunction]
fn lambda_only_fit(data: &PyDataset, fixed_q: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let q = to_matrix(fixed_q)?;
    Ok(oracle::lambda_only_fit(&data.inner, &q.view()).map_err(err)?.to_vec())
}

#[pyfunction]
fn loss_mse(net: &PyNetwork, data: &PyDataset) -> PyResult<f64> {
    objective::loss_mse(&net.inner, &data.inner).map_err(err)
}

#[pyfunction]
fn nmse(net: &PyNetwork, data: &PyDataset) -> PyResult<f64> {
    harness::nmse(&net.inner, &data.inner).map_err(err)
}

#[pyfunction]
fn penalty_orth(q: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(objective::penalty_orth(&to_matrix(q)?.view()))
}

#[pyfunction]
#[pyo3(signature = (net, data, gamma=0.0, use_alpha=false))]
fn grad_norm(net: &PyNetwork, data: &PyDataset, gamma: f64, use_alpha: bool) -> PyResult<f64> {
    let cfg = objective::ObjectiveConfig {
        gamma,
        use_alpha,
        penalty_mode: objective::PenaltyMode::PerLayer,
    };
    Ok(objective::grad(&net.inner, &data.inner, &cfg).map_err(err)?.norm())
}

/// Initialize a single-layer network: scheme is "random-gaussian",
/// "zero-lambda-identity-q", or "multivariate-block-orthogonal".
#[pyfunction]
#[pyo3(signature = (d, k, seed, outputs=1, scheme="random-gaussian"))]
fn initialize_single(
    d: usize,
    k: usize,
    seed: u64,
    outputs: usize,
    scheme: &str,
) -> PyResult<PyNetwork> {
    let init = match scheme {
        "random-gaussian" => optimize::InitScheme::default(),
        "zero-lambda-identity-q" => optimize::InitScheme::ZeroLambdaIdentityQ,
        "multivariate-block-orthogonal" => optimize::InitScheme::MultivariateBlockOrthogonal,
        other => return Err(PyValueError::new_err(format!("unknown init scheme `{other}`"))),
    };
    let arch = optimize::NetworkArch::Single { d, k, outputs };
    Ok(PyNetwork { inner: optimize::initialize(&arch, &init, seed).map_err(err)? })
}

/// Train a network. `optimizer` is "adam", "gd", or "sgd"; `gamma > 0`
/// enables the orthogonality penalty; `use_alpha` makes the norm-regressor
/// weight trainable.
#[pyfunction]
#[pyo3(signature = (net, data, epochs, seed=0, optimizer="adam", learning_rate=1e-3,
                    gamma=0.0, use_alpha=false, penalty_mode="per-layer", batch_size=64,
                    grad_tol=1e-8))]
#[allow(clippy::too_many_arguments)]
fn train(
    net: &PyNetwork,
    data: &PyDataset,
    epochs: usize,
    seed: u64,
    optimizer: &str,
    learning_rate: f64,
    gamma: f64,
    use_alpha: bool,
    penalty_mode: &str,
    batch_size: usize,
    grad_tol: f64,
) -> PyResult<PyTrainResult> {
    let opt = match optimizer {
        "adam" => optimize::OptimizerKind::Adam,
        "gd" => optimize::OptimizerKind::Gd,
        "sgd" => optimize::OptimizerKind::Sgd,
        other => return Err(PyValueError::new_err(format!("unknown optimizer `{other}`"))),
    };
    let mode = match penalty_mode {
        "per-layer" => objective::PenaltyMode::PerLayer,
        "matricized" => objective::PenaltyMode::Matricized,
        "output-blocks" => objective::PenaltyMode::OutputBlocks,
        other => return Err(PyValueError::new_err(format!("unknown penalty mode `{other}`"))),
    };
    let obj = objective::ObjectiveConfig { gamma, use_alpha, penalty_mode: mode };
    let cfg = optimize::TrainConfig {
        optimizer: opt,
        learning_rate,
        max_epochs: epochs,
        batch_size,
        grad_tol,
        seed,
        ..optimize::TrainConfig::default()
    };
    let trace = optimize::train(&net.inner, &data.inner, &obj, &cfg).map_err(err)?;
    Ok(PyTrainResult {
        final_loss: trace.final_loss(),
        final_grad_norm: trace.final_grad_norm(),
        epochs_used: trace.epochs_used,
        converged: trace.converged,
        diverged: trace.diverged,
        model: PyNetwork { inner: trace.final_model },
    })
}

/// Construct the spurious-minimum family: returns `(data, trapped_layer)`.
#[pyfunction]
fn make_example1(d: usize, n: usize, seed: u64) -> PyResult<(PyDataset, PyQLLayer)> {
    let (data, layer) = landscape::make_example1(d, n, seed).map_err(err)?;
    Ok((PyDataset { inner: data }, PyQLLayer { inner: layer }))
}

/// Classify a single-layer stationary-point candidate against the oracle:
/// returns one of "GlobalMin", "NegativeCurvature",
/// "SemidefiniteResidualNonGlobal", "NotStationary".
#[pyfunction]
#[pyo3(signature = (layer, data, sol, gamma=0.0, use_alpha=false))]
fn classify_point(
    layer: &PyQLLayer,
    data: &PyDataset,
    sol: &PyOracleSolution,
    gamma: f64,
    use_alpha: bool,
) -> PyResult<String> {
    let cfg = objective::ObjectiveConfig {
        gamma,
        use_alpha,
        penalty_mode: objective::PenaltyMode::PerLayer,
    };
    let tols = landscape::ClassifyTols::for_instance(&data.inner, sol.inner.loss_star);
    let class = landscape::classify_point(&layer.inner, &data.inner, &sol.inner, &cfg, &tols)
        .map_err(err)?;
    Ok(format!("{:?}", class.tag))
}

/// Maximum relative deviation between a GD trajectory and its
/// `(β²λ, Q/β)`-rescaled counterpart run with step sizes `(η_Q/β², β⁴η_λ)`.
#[pyfunction]
fn scaled_trajectory_check(
    layer: &PyQLLayer,
    data: &PyDataset,
    beta: f64,
    eta_q: f64,
    eta_lambda: f64,
    steps: usize,
) -> PyResult<f64> {
    optimize::scaled_trajectory_check(&layer.inner, &data.inner, beta, eta_q, eta_lambda, steps)
        .map_err(err)
}

#[pymodule]
fn qlnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyQLLayer>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyOracleSolution>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(gen_planted_diagonal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_planted_dense, m)?)?;
    m.add_function(wrap_pyfunction!(gen_independent, m)?)?;
    m.add_function(wrap_pyfunction!(gen_deep_planted, m)?)?;
    m.add_function(wrap_pyfunction!(solve_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_solver, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_only_fit, m)?)?;
    m.add_function(wrap_pyfunction!(loss_mse, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(penalty_orth, m)?)?;
    m.add_function(wrap_pyfunction!(grad_norm, m)?)?;
    m.add_function(wrap_pyfunction!(initialize_single, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_example1, m)?)?;
    m.add_function(wrap_pyfunction!(classify_point, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_trajectory_check, m)?)?;
    Ok(())
}
