//! Python bindings: the network, the low-rank posterior, the flagging
//! strategies and the lifecycle benchmark.

use std::collections::BTreeMap;

use dlm_core::bench::{self, LifecycleConfig};
use dlm_core::config::RunConfig;
use dlm_core::experiment::Experiment;
use dlm_core::nnet::{Architecture, Model, TrainOptions};
use dlm_core::select::{self, KernelMatrix, SelectionResult, Strategy};
use dlm_core::uq::{self, FitMode, LowRankPosterior, PosteriorOptions};
use dlm_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyList, PyTuple};

pub mod convert;

use convert::ReportData;

fn py_err(e: Error) -> PyErr {
    if e.is_config() || matches!(e, Error::DimensionMismatch { .. } | Error::InvalidBudget { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

#[pyclass(name = "Model", module = "dlm", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (layer_widths, activation = "tanh", output_noise_sigma = 0.1, seed = 0))]
    fn new(layer_widths: Vec<usize>, activation: &str, output_noise_sigma: f64, seed: u64) -> PyResult<Self> {
        let arch = Architecture::new(layer_widths, activation.parse().map_err(py_err)?, output_noise_sigma)
            .map_err(py_err)?;
        Ok(Self {
            inner: Model::initialized(arch, seed),
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.arch.num_params()
    }

    #[getter]
    fn layer_widths(&self) -> Vec<usize> {
        self.inner.arch.layer_widths().to_vec()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.inner.arch.activation().name()
    }

    #[getter]
    fn output_noise_sigma(&self) -> f64 {
        self.inner.arch.output_noise_sigma()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.as_slice().to_vec()
    }

    /// Predicted mean; the covariance is `output_noise_sigma**2 * I`.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let pred = self.inner.forward(&x).map_err(py_err)?;
        Ok(pred.mean.iter().copied().collect())
    }

    /// `d_out` rows of `num_params` partial derivatives.
    fn weight_jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.weight_jacobian(&x).map_err(py_err)?;
        Ok(j.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn mean_loss(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
        let data = convert::examples(&inputs, Some(&targets), self.inner.arch.output_dim()).map_err(py_err)?;
        self.inner.mean_loss(&data).map_err(py_err)
    }

    /// SGD on the mean loss; returns `(initial_loss, final_loss)`.
    #[pyo3(signature = (inputs, targets, epochs = 200, learning_rate = 1e-3, minibatch_size = 20, seed = 0))]
    fn train(
        &mut self,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        epochs: usize,
        learning_rate: f64,
        minibatch_size: usize,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let data = convert::examples(&inputs, Some(&targets), self.inner.arch.output_dim()).map_err(py_err)?;
        let opts = TrainOptions {
            epochs,
            learning_rate,
            minibatch_size,
            seed,
        };
        let report = self.inner.train(&data, &opts).map_err(py_err)?;
        Ok((report.initial_loss, report.final_loss))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: Model::from_bytes(data).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layer_widths={:?}, activation='{}', num_params={})",
            self.inner.arch.layer_widths(),
            self.inner.arch.activation(),
            self.inner.arch.num_params()
        )
    }
}

#[pyclass(name = "Posterior", module = "dlm", from_py_object)]
#[derive(Clone)]
struct PyPosterior {
    inner: LowRankPosterior,
}

#[pymethods]
impl PyPosterior {
    /// Low-rank Laplace posterior around the model's current weights.
    #[staticmethod]
    #[pyo3(signature = (model, inputs, rank = 40, epsilon = 1.0, mode = "exact", seed = 0))]
    fn fit(model: &PyModel, inputs: Vec<Vec<f64>>, rank: usize, epsilon: f64, mode: &str, seed: u64) -> PyResult<Self> {
        let arch = &model.inner.arch;
        let data = convert::examples(&inputs, None, arch.output_dim()).map_err(py_err)?;
        let mode: FitMode = mode.parse().map_err(py_err)?;
        let opts = PosteriorOptions {
            rank,
            prior_scale: epsilon,
            mode,
            seed,
        };
        let inner = uq::fit_posterior(arch, &model.inner.weights, &data, &opts).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.prior_scale()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn uncertainty(&self, model: &PyModel, x: Vec<f64>) -> PyResult<f64> {
        let l = uq::model_belief_update(&model.inner.arch, &model.inner.weights, &x).map_err(py_err)?;
        self.inner.uncertainty(&l).map_err(py_err)
    }

    fn uncertainties(&self, model: &PyModel, inputs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        inputs.iter().map(|x| self.uncertainty(model, x.clone())).collect()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: LowRankPosterior::from_bytes(data).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Posterior(num_params={}, rank={}, epsilon={})",
            self.inner.num_params(),
            self.inner.rank(),
            self.inner.prior_scale()
        )
    }
}

#[pyclass(name = "Selection", module = "dlm", get_all, skip_from_py_object)]
struct PySelection {
    flags: Vec<bool>,
    weights: Vec<f64>,
    objective_trace: Vec<f64>,
}

#[pymethods]
impl PySelection {
    fn flagged_indices(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter_map(|(i, &f)| f.then_some(i)).collect()
    }

    fn __len__(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    fn __repr__(&self) -> String {
        format!("Selection(flagged={:?})", self.flagged_indices())
    }
}

impl From<SelectionResult> for PySelection {
    fn from(s: SelectionResult) -> Self {
        Self {
            flags: s.flags,
            weights: s.weights,
            objective_trace: s.objective_trace,
        }
    }
}

fn belief_kernel(model: &PyModel, inputs: &[Vec<f64>]) -> PyResult<KernelMatrix> {
    let updates = inputs
        .iter()
        .map(|x| uq::model_belief_update(&model.inner.arch, &model.inner.weights, x))
        .collect::<dlm_core::Result<Vec<_>>>()
        .map_err(py_err)?;
    select::build_kernel(&updates).map_err(py_err)
}

/// Gram matrix of the inputs' belief updates.
#[pyfunction]
fn kernel(model: &PyModel, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let k = belief_kernel(model, &inputs)?;
    Ok(k.entries().row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[pyfunction]
fn flag_random(m: usize, k: usize, seed: u64) -> PyResult<PySelection> {
    Ok(select::flag_random(m, k, seed).map_err(py_err)?.into())
}

#[pyfunction]
fn flag_scod(scores: Vec<f64>, k: usize) -> PyResult<PySelection> {
    Ok(select::flag_scod_k(&scores, k).map_err(py_err)?.into())
}

/// Frank-Wolfe diverse subset of at most `k` inputs.
#[pyfunction]
fn flag_diverse(model: &PyModel, inputs: Vec<Vec<f64>>, k: usize) -> PyResult<PySelection> {
    Ok(select::flag_diverse(&belief_kernel(model, &inputs)?, k).into())
}

#[pyclass(name = "Report", module = "dlm", get_all, skip_from_py_object)]
struct PyReport {
    strategy: String,
    budget: f64,
    losses: Vec<f64>,
    num_flagged: Vec<usize>,
    cumulative_cost: Vec<usize>,
    total_cost_pct: f64,
    lifetime_mean_loss: f64,
    avg_improvement_pct: Option<f64>,
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!(
            "Report(strategy='{}', budget={}, total_cost_pct={:.1}, lifetime_mean_loss={:.4})",
            self.strategy, self.budget, self.total_cost_pct, self.lifetime_mean_loss
        )
    }
}

impl From<ReportData> for PyReport {
    fn from(d: ReportData) -> Self {
        Self {
            strategy: d.strategy,
            budget: d.budget,
            losses: d.losses,
            num_flagged: d.num_flagged,
            cumulative_cost: d.cumulative_cost,
            total_cost_pct: d.total_cost_pct,
            lifetime_mean_loss: d.lifetime_mean_loss,
            avg_improvement_pct: d.avg_improvement_pct,
        }
    }
}

/// Render a Python value as a config string; sequences become comma lists.
fn config_value(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if v.is_instance_of::<PyList>() || v.is_instance_of::<PyTuple>() {
        let parts = v
            .try_iter()?
            .map(|item| config_value(&item?))
            .collect::<PyResult<Vec<_>>>()?;
        return Ok(parts.join(","));
    }
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    Ok(v.str()?.to_string())
}

/// A seeded teacher, training set, pretrained student and fitted posterior.
#[pyclass(name = "Experiment", module = "dlm", skip_from_py_object)]
struct PyExperiment {
    inner: Experiment,
    config: RunConfig,
}

impl PyExperiment {
    fn lifecycle(&self, strategy: &str, budget: f64) -> PyResult<LifecycleConfig> {
        let strategy: Strategy = strategy.parse().map_err(py_err)?;
        Ok(LifecycleConfig {
            strategy,
            budget_fraction: budget,
            ..self.config.lifecycle_config(self.inner.master_seed)
        })
    }
}

#[pymethods]
impl PyExperiment {
    /// `config` maps run-configuration keys to values, e.g.
    /// `{"hidden_widths": [8, 8], "num_batches": 20}`.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(py: Python<'_>, seed: u64, config: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let pairs = config
            .unwrap_or_default()
            .iter()
            .map(|(k, v)| Ok((k.clone(), config_value(v)?)))
            .collect::<PyResult<Vec<_>>>()?;
        let config = convert::config_from_pairs(&pairs).map_err(py_err)?;
        let exp_cfg = config.experiment_config();
        let inner = py
            .detach(|| Experiment::prepare(&exp_cfg, seed))
            .map_err(py_err)?;
        Ok(Self { inner, config })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.master_seed
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn posterior(&self) -> PyPosterior {
        PyPosterior {
            inner: self.inner.posterior.clone(),
        }
    }

    /// Resolved configuration as `(key, value)` pairs.
    fn config(&self) -> Vec<(&'static str, String)> {
        self.config.entries()
    }

    /// Inputs of batch `index` of the stream and their regime names.
    fn batch(&self, index: usize) -> PyResult<(Vec<Vec<f64>>, Vec<&'static str>)> {
        let b = dlm_core::datagen::next_batch(&self.inner.stream, &self.inner.teacher, index).map_err(py_err)?;
        Ok((b.inputs, b.regime_tags.iter().map(|t| t.name()).collect()))
    }

    /// Noiseless teacher label.
    fn oracle(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        dlm_core::datagen::oracle_label(&self.inner.teacher, &x).map_err(py_err)
    }

    /// Run the benchmark loop. With `normalize`, both naive anchors are run
    /// too and `avg_improvement_pct` is filled in.
    #[pyo3(signature = (strategy, budget = 0.5, normalize = true))]
    fn run(&self, py: Python<'_>, strategy: &str, budget: f64, normalize: bool) -> PyResult<PyReport> {
        let lc = self.lifecycle(strategy, budget)?;
        let exp = &self.inner;
        let report = py
            .detach(|| -> dlm_core::Result<_> {
                let mut report = bench::run_lifecycle(exp, &lc)?;
                if normalize {
                    let anchor = |s, b| {
                        bench::run_lifecycle(
                            exp,
                            &LifecycleConfig {
                                strategy: s,
                                budget_fraction: b,
                                ..lc.clone()
                            },
                        )
                    };
                    let lo = anchor(Strategy::NaiveFalse, 0.0)?;
                    let hi = anchor(Strategy::NaiveTrue, 1.0)?;
                    report.avg_improvement_pct = Some(bench::normalize_improvement(&report, &lo, &hi)?);
                }
                Ok(report)
            })
            .map_err(py_err)?;
        Ok(ReportData::from(&report).into())
    }

    /// Every strategy over `budgets` (default 5%..75%); rows of
    /// `(strategy, budget_pct, cost_pct, improvement_pct)`.
    #[pyo3(signature = (budgets = None))]
    fn sweep(&self, py: Python<'_>, budgets: Option<Vec<f64>>) -> PyResult<Vec<(&'static str, f64, f64, f64)>> {
        let budgets = budgets.unwrap_or_else(|| self.config.budgets.clone());
        let base = self.lifecycle("naive_false", 0.0)?;
        let exp = &self.inner;
        let rows = py
            .detach(|| bench::budget_sweep(exp, &base, &Strategy::ALL, &budgets))
            .map_err(py_err)?;
        Ok(rows
            .iter()
            .map(|r| (r.strategy.name(), r.budget_pct, r.cost_pct, r.improvement_pct))
            .collect())
    }
}

#[pymodule]
fn dlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PySelection>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add_function(wrap_pyfunction!(flag_random, m)?)?;
    m.add_function(wrap_pyfunction!(flag_scod, m)?)?;
    m.add_function(wrap_pyfunction!(flag_diverse, m)?)?;
    m.add("STRATEGIES", Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
