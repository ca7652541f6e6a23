//! Python bindings for the flocculation solver: grids, kernels, conditional
//! measures, the forward integrator, the metric suite, and the inverse
//! machinery, under the module name `flocpy`.

// The pyo3 macros insert a PyErr -> PyErr conversion on every PyResult
// return, which trips this lint on code we do not write.
#![allow(clippy::useless_conversion)]

use floc_core::domain::{project, Grid, KernelSet, SizeDistribution};
use floc_core::harness::{truth_measure, TruthFamily};
use floc_core::inverse::{InverseSetup, MinimizeOptions, ObservationSet};
use floc_core::measures::{
    conditional_distance, ConditionalMeasure, FiniteMeasure, MetricMode, Representation,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn err(e: floc_core::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse_mode(mode: &str, tol: f64) -> PyResult<MetricMode> {
    match mode {
        "prohorov" => Ok(MetricMode::Prohorov { tol }),
        "levy" => Ok(MetricMode::Levy),
        "kolmogorov" => Ok(MetricMode::Kolmogorov),
        other => Err(PyValueError::new_err(format!("unknown metric mode {other:?}"))),
    }
}

fn parse_family(family: &str) -> PyResult<TruthFamily> {
    match family {
        "beta22" => Ok(TruthFamily::Beta22),
        "arcsine" => Ok(TruthFamily::Arcsine),
        other => Err(PyValueError::new_err(format!("unknown truth family {other:?}"))),
    }
}

#[pyclass(name = "Grid", frozen)]
#[derive(Clone)]
struct PyGrid(Grid);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(n_cells: usize, x_max: f64) -> PyResult<Self> {
        Ok(PyGrid(Grid::new(n_cells, x_max).map_err(err)?))
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.0.n_cells()
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max()
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.0.dx()
    }

    fn node(&self, j: usize) -> PyResult<f64> {
        if j > self.0.n_cells() {
            return Err(PyValueError::new_err("node index out of range"));
        }
        Ok(self.0.node(j))
    }

    fn nodes(&self) -> Vec<f64> {
        self.0.nodes()
    }

    fn __repr__(&self) -> String {
        format!("Grid(n_cells={}, x_max={})", self.0.n_cells(), self.0.x_max())
    }
}

#[pyclass(name = "KernelSet", frozen)]
#[derive(Clone)]
struct PyKernelSet(KernelSet);

#[pymethods]
impl PyKernelSet {
    /// Power-law kernels: aggregation c_a (x^1/3 + y^1/3)^3 truncated at
    /// x + y > x_max, fragmentation c_f x^1/3, removal c_mu x^1/3.
    #[staticmethod]
    fn builtin(c_a: f64, c_f: f64, c_mu: f64, x_max: f64) -> PyResult<Self> {
        Ok(PyKernelSet(KernelSet::builtin(c_a, c_f, c_mu, x_max).map_err(err)?))
    }

    fn k_a(&self, x: f64, y: f64) -> f64 {
        self.0.k_a(x, y)
    }

    fn k_f(&self, x: f64) -> f64 {
        self.0.k_f(x)
    }

    fn mu(&self, x: f64) -> f64 {
        self.0.mu(x)
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max()
    }
}

#[pyclass(name = "FiniteMeasure", frozen)]
#[derive(Clone)]
struct PyFiniteMeasure(FiniteMeasure);

#[pymethods]
impl PyFiniteMeasure {
    #[new]
    fn new(atoms: Vec<(f64, f64)>, x_max: f64) -> PyResult<Self> {
        Ok(PyFiniteMeasure(FiniteMeasure::new(&atoms, x_max).map_err(err)?))
    }

    #[staticmethod]
    fn dirac(loc: f64, x_max: f64) -> PyResult<Self> {
        Ok(PyFiniteMeasure(FiniteMeasure::dirac(loc, x_max).map_err(err)?))
    }

    fn atoms(&self) -> Vec<(f64, f64)> {
        self.0.atoms().to_vec()
    }
}

#[pyclass(name = "ConditionalMeasure", frozen)]
#[derive(Clone)]
struct PyConditionalMeasure(ConditionalMeasure);

#[pymethods]
impl PyConditionalMeasure {
    /// Row-stochastic lower-triangular weights on an m x l atom grid.
    #[new]
    #[pyo3(signature = (weights, daughter, parent, representation="atomic-cdf"))]
    fn new(
        weights: Vec<Vec<f64>>,
        daughter: PyGrid,
        parent: PyGrid,
        representation: &str,
    ) -> PyResult<Self> {
        let rep = match representation {
            "atomic-cdf" => Representation::AtomicCdf,
            "density" => Representation::Density,
            other => {
                return Err(PyValueError::new_err(format!("unknown representation {other:?}")))
            }
        };
        Ok(PyConditionalMeasure(
            ConditionalMeasure::from_weights(weights, daughter.0, parent.0, rep).map_err(err)?,
        ))
    }

    /// Equal weight on every admissible atom of each row.
    #[staticmethod]
    fn uniform(m_atoms: usize, l_rows: usize, x_max: f64) -> PyResult<Self> {
        Ok(PyConditionalMeasure(ConditionalMeasure::uniform(m_atoms, l_rows, x_max).map_err(err)?))
    }

    /// Exact cell masses of a built-in family: "beta22" or "arcsine".
    #[staticmethod]
    fn truth(family: &str, m_atoms: usize, l_rows: usize, x_max: f64) -> PyResult<Self> {
        let fam = parse_family(family)?;
        Ok(PyConditionalMeasure(truth_measure(fam, m_atoms, l_rows, x_max).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConditionalMeasure(ConditionalMeasure::load(&path).map_err(err)?))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConditionalMeasure(ConditionalMeasure::from_json_str(text).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json_string().map_err(err)
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        self.0.weights().to_vec()
    }

    #[getter]
    fn m_atoms(&self) -> usize {
        self.0.daughter_grid().n_cells()
    }

    #[getter]
    fn l_rows(&self) -> usize {
        self.0.parent_grid().n_cells()
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.0.daughter_grid().x_max()
    }

    /// Conditional CDF F(x | y), clamped to 1 for x >= y and for y = 0.
    fn cdf(&self, x: f64, y: f64) -> PyResult<f64> {
        self.0.cdf(x, y).map_err(err)
    }

    fn resample(&self, m_atoms: usize, l_rows: usize) -> PyResult<Self> {
        let xm = self.0.daughter_grid().x_max();
        let daughter = Grid::new(m_atoms, xm).map_err(err)?;
        let parent = Grid::new(l_rows, xm).map_err(err)?;
        Ok(PyConditionalMeasure(self.0.resample(daughter, parent).map_err(err)?))
    }

    fn row(&self, l: usize) -> PyResult<Vec<f64>> {
        if l == 0 || l > self.0.parent_grid().n_cells() {
            return Err(PyValueError::new_err("row index out of range"));
        }
        Ok(self.0.row(l).to_vec())
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory(floc_core::forward::Trajectory);

#[pymethods]
impl PyTrajectory {
    fn times(&self) -> Vec<f64> {
        self.0.times().to_vec()
    }

    fn states(&self) -> Vec<Vec<f64>> {
        self.0.states().to_vec()
    }

    fn final_state(&self) -> Vec<f64> {
        self.0.final_state().values().to_vec()
    }

    fn state_at(&self, t: f64) -> PyResult<Vec<f64>> {
        self.0.state_at(t).map_err(err)
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }
}

#[pyclass(name = "ObservationSet", frozen)]
#[derive(Clone)]
struct PyObservationSet(ObservationSet);

#[pymethods]
impl PyObservationSet {
    fn counts(&self) -> Vec<Vec<f64>> {
        self.0.counts.clone()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    fn bin_edges(&self) -> Vec<f64> {
        self.0.bin_edges.clone()
    }

    #[getter]
    fn noise_sigma(&self) -> f64 {
        self.0.noise_sigma
    }

    #[getter]
    fn rng_seed(&self) -> Option<u64> {
        self.0.rng_seed
    }

    fn save(&self, csv_path: PathBuf, meta_path: PathBuf) -> PyResult<()> {
        self.0.save(&csv_path, &meta_path).map_err(err)
    }

    #[staticmethod]
    fn load(csv_path: PathBuf, meta_path: PathBuf) -> PyResult<Self> {
        Ok(PyObservationSet(ObservationSet::load(&csv_path, &meta_path).map_err(err)?))
    }
}

#[pyclass(name = "Estimate", frozen)]
struct PyEstimate {
    #[pyo3(get)]
    cost: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
    measure: ConditionalMeasure,
    history: Vec<f64>,
}

#[pymethods]
impl PyEstimate {
    fn measure(&self) -> PyConditionalMeasure {
        PyConditionalMeasure(self.measure.clone())
    }

    fn history(&self) -> Vec<f64> {
        self.history.clone()
    }
}

/// Default initial number density 1000 exp(-x) projected onto the grid.
#[pyfunction]
fn default_initial_state(grid: PyGrid) -> PyResult<Vec<f64>> {
    Ok(project(|x| 1e3 * (-x).exp(), grid.0).map_err(err)?.values().to_vec())
}

/// Fixed-step RK4 solve of the aggregation-breakage-removal system.
#[pyfunction]
fn integrate(
    b0: Vec<f64>,
    grid: PyGrid,
    gamma: &PyConditionalMeasure,
    kernels: &PyKernelSet,
    t_f: f64,
    n_steps: usize,
) -> PyResult<PyTrajectory> {
    let state = SizeDistribution::new(grid.0, b0).map_err(err)?;
    Ok(PyTrajectory(
        floc_core::forward::integrate(&state, &gamma.0, &kernels.0, t_f, n_steps).map_err(err)?,
    ))
}

/// Binned particle counts of a trajectory at the sample times.
#[pyfunction]
fn partial_moments(
    traj: &PyTrajectory,
    bin_edges: Vec<f64>,
    sample_times: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    floc_core::forward::partial_moments(&traj.0, &bin_edges, &sample_times).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (mu, nu, tol=1e-6))]
fn prohorov(mu: &PyFiniteMeasure, nu: &PyFiniteMeasure, tol: f64) -> PyResult<f64> {
    floc_core::measures::prohorov(&mu.0, &nu.0, tol).map_err(err)
}

#[pyfunction]
fn levy(mu: &PyFiniteMeasure, nu: &PyFiniteMeasure) -> f64 {
    floc_core::measures::levy(&mu.0, &nu.0)
}

#[pyfunction]
fn total_variation(mu: &PyFiniteMeasure, nu: &PyFiniteMeasure) -> f64 {
    floc_core::measures::total_variation(&mu.0, &nu.0)
}

/// Sup over parent sizes of the per-parent metric: mode "prohorov",
/// "levy", or "kolmogorov".
#[pyfunction]
#[pyo3(signature = (f, g, mode="kolmogorov", tol=1e-6))]
fn distance(
    f: &PyConditionalMeasure,
    g: &PyConditionalMeasure,
    mode: &str,
    tol: f64,
) -> PyResult<f64> {
    conditional_distance(&f.0, &g.0, parse_mode(mode, tol)?).map_err(err)
}

/// Largest pointwise conditional-CDF difference over the sample points.
#[pyfunction]
fn sampled_uniform_error(
    f: &PyConditionalMeasure,
    g: &PyConditionalMeasure,
    points: Vec<(f64, f64)>,
) -> PyResult<f64> {
    floc_core::measures::sampled_uniform_error(&f.0, &g.0, &points).map_err(err)
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn simplex_project(v: Vec<f64>) -> Vec<f64> {
    floc_core::inverse::simplex_project(&v)
}

/// Exact binned counts from the truth plus optional Gaussian noise.
#[pyfunction]
#[pyo3(signature = (truth, kernels, b0, grid, t_f, n_steps, bin_edges, sample_times, sigma=0.0, rng_seed=0))]
#[allow(clippy::too_many_arguments)]
fn synthesize_observations(
    truth: &PyConditionalMeasure,
    kernels: &PyKernelSet,
    b0: Vec<f64>,
    grid: PyGrid,
    t_f: f64,
    n_steps: usize,
    bin_edges: Vec<f64>,
    sample_times: Vec<f64>,
    sigma: f64,
    rng_seed: u64,
) -> PyResult<PyObservationSet> {
    let state = SizeDistribution::new(grid.0, b0).map_err(err)?;
    Ok(PyObservationSet(
        floc_core::inverse::synthesize_observations(
            &truth.0,
            &kernels.0,
            &state,
            t_f,
            n_steps,
            &bin_edges,
            &sample_times,
            sigma,
            rng_seed,
        )
        .map_err(err)?,
    ))
}

/// Squared data misfit of a candidate measure.
#[pyfunction]
fn cost(
    f: &PyConditionalMeasure,
    kernels: &PyKernelSet,
    b0: Vec<f64>,
    grid: PyGrid,
    t_f: f64,
    n_steps: usize,
    observations: &PyObservationSet,
) -> PyResult<f64> {
    let state = SizeDistribution::new(grid.0, b0).map_err(err)?;
    let setup = InverseSetup::new(grid.0, kernels.0.clone(), state, t_f, n_steps, observations.0.clone())
        .map_err(err)?;
    floc_core::inverse::cost(&f.0, &setup).map_err(err)
}

/// Projected-gradient recovery of the daughter measure from observations.
#[pyfunction]
#[pyo3(signature = (seed, kernels, b0, grid, t_f, n_steps, observations, max_iters=500, step_init=1.0, tol_cost=1e-8, tol_grad=1e-6, fd_step=1e-5))]
#[allow(clippy::too_many_arguments)]
fn minimize(
    seed: &PyConditionalMeasure,
    kernels: &PyKernelSet,
    b0: Vec<f64>,
    grid: PyGrid,
    t_f: f64,
    n_steps: usize,
    observations: &PyObservationSet,
    max_iters: usize,
    step_init: f64,
    tol_cost: f64,
    tol_grad: f64,
    fd_step: f64,
) -> PyResult<PyEstimate> {
    let state = SizeDistribution::new(grid.0, b0).map_err(err)?;
    let setup = InverseSetup::new(grid.0, kernels.0.clone(), state, t_f, n_steps, observations.0.clone())
        .map_err(err)?;
    let options = MinimizeOptions {
        max_iters,
        step_init,
        tol_cost,
        tol_grad,
        fd_step,
        ..Default::default()
    };
    let est = floc_core::inverse::minimize(&setup, &seed.0, &options).map_err(err)?;
    Ok(PyEstimate {
        cost: est.cost,
        iterations: est.iterations,
        converged: est.converged,
        measure: est.measure,
        history: est.history,
    })
}

#[pymodule]
fn flocpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyKernelSet>()?;
    m.add_class::<PyFiniteMeasure>()?;
    m.add_class::<PyConditionalMeasure>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyObservationSet>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(default_initial_state, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(partial_moments, m)?)?;
    m.add_function(wrap_pyfunction!(prohorov, m)?)?;
    m.add_function(wrap_pyfunction!(levy, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(sampled_uniform_error, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_project, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_observations, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    Ok(())
}
