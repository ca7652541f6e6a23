//! Recovery of the daughter measure from binned count data: least-squares
//! cost, finite-difference gradients along the feasible manifold,
//! projection onto row simplices, projected-gradient descent, and the
//! grid-refinement study.

use std::path::Path;

use rand::SeedableRng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{project, Grid, KernelSet, SizeDistribution};
use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::forward::{integrate, partial_moments};
use crate::measures::{conditional_distance, ConditionalMeasure, MetricMode};

/// Atom count of the common fine grid on which study errors are measured.
pub const REFERENCE_ATOMS: usize = 240;

/// Binned particle counts with their sampling geometry and noise record.
/// `counts[i][j]` is bin `j` at sample time `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub counts: Vec<Vec<f64>>,
    pub bin_edges: Vec<f64>,
    pub times: Vec<f64>,
    pub noise_sigma: f64,
    pub rng_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ObservationMeta {
    bin_edges: Vec<f64>,
    times: Vec<f64>,
    noise_sigma: f64,
    rng_seed: Option<u64>,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<()> {
        if self.bin_edges.len() < 2 {
            return Err(Error::InvalidObservations { reason: "fewer than two bin edges".into() });
        }
        for w in self.bin_edges.windows(2) {
            // !(a < b) rather than b <= a: it also rejects NaN edges.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(w[0] < w[1]) {
                return Err(Error::InvalidObservations {
                    reason: format!("bin edges not increasing at {} >= {}", w[0], w[1]),
                });
            }
        }
        if self.counts.len() != self.times.len() {
            return Err(Error::InvalidObservations {
                reason: format!(
                    "{} count rows for {} sample times",
                    self.counts.len(),
                    self.times.len()
                ),
            });
        }
        let bins = self.bin_edges.len() - 1;
        for (i, row) in self.counts.iter().enumerate() {
            if row.len() != bins {
                return Err(Error::InvalidObservations {
                    reason: format!("row {} has {} entries, {bins} bins", i + 1, row.len()),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidObservations {
                    reason: format!("non-finite count in row {}", i + 1),
                });
            }
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidObservations { reason: "non-finite sample time".into() });
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidObservations {
                reason: format!("noise sigma {}", self.noise_sigma),
            });
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let bins = self.bin_edges.len() - 1;
        let mut out = String::from("t");
        for j in 1..=bins {
            out.push_str(&format!(",bin_{j}"));
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.counts) {
            out.push_str(&g17(*t));
            for v in row {
                out.push(',');
                out.push_str(&g17(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Writes the counts as CSV and the geometry/noise record as JSON.
    pub fn save(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(csv_path, self.to_csv())?;
        let meta = ObservationMeta {
            bin_edges: self.bin_edges.clone(),
            times: self.times.clone(),
            noise_sigma: self.noise_sigma,
            rng_seed: self.rng_seed,
        };
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta: ObservationMeta =
            serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let text = std::fs::read_to_string(csv_path)?;
        let mut counts = Vec::new();
        let mut csv_times = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 {
                if !line.starts_with("t,") {
                    return Err(Error::Parse { line: 1, reason: format!("bad header {line:?}") });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    reason: format!("{s:?}: {e}"),
                })
            });
            csv_times.push(fields.next().transpose()?.ok_or(Error::Parse {
                line: idx + 1,
                reason: "empty row".into(),
            })?);
            counts.push(fields.collect::<Result<Vec<f64>>>()?);
        }
        if csv_times != meta.times {
            return Err(Error::InvalidObservations {
                reason: "CSV sample times disagree with the metadata record".into(),
            });
        }
        let set = ObservationSet {
            counts,
            bin_edges: meta.bin_edges,
            times: meta.times,
            noise_sigma: meta.noise_sigma,
            rng_seed: meta.rng_seed,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Everything a cost evaluation needs besides the measure itself.
#[derive(Debug, Clone)]
pub struct InverseSetup {
    grid: Grid,
    kernels: KernelSet,
    b0: SizeDistribution,
    t_f: f64,
    n_steps: usize,
    observations: ObservationSet,
}

impl InverseSetup {
    pub fn new(
        grid: Grid,
        kernels: KernelSet,
        b0: SizeDistribution,
        t_f: f64,
        n_steps: usize,
        observations: ObservationSet,
    ) -> Result<Self> {
        if kernels.x_max() != grid.x_max() {
            return Err(Error::IncompatibleDomains {
                reason: format!(
                    "kernel x_max {} vs grid x_max {}",
                    kernels.x_max(),
                    grid.x_max()
                ),
            });
        }
        if b0.grid() != grid {
            return Err(Error::GridMismatch {
                reason: "initial state lives on a different grid".into(),
            });
        }
        if !t_f.is_finite() || t_f <= 0.0 || n_steps == 0 {
            return Err(Error::invalid_input(format!("t_f = {t_f}, n_steps = {n_steps}")));
        }
        observations.validate()?;
        let edges = &observations.bin_edges;
        if edges[0] < 0.0 || *edges.last().expect("nonempty") > grid.x_max() {
            return Err(Error::InvalidObservations {
                reason: "bin edges outside the size domain".into(),
            });
        }
        if observations.times.iter().any(|&t| t < 0.0 || t > t_f) {
            return Err(Error::InvalidObservations {
                reason: "sample time outside [0, t_f]".into(),
            });
        }
        Ok(InverseSetup { grid, kernels, b0, t_f, n_steps, observations })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kernels(&self) -> &KernelSet {
        &self.kernels
    }

    pub fn b0(&self) -> &SizeDistribution {
        &self.b0
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.observations.bin_edges
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.observations.times
    }
}

/// Sum of squared residuals between the binned counts predicted under `f`
/// and the observed counts. Deterministic for fixed inputs.
pub fn cost(f: &ConditionalMeasure, setup: &InverseSetup) -> Result<f64> {
    let run = || -> Result<f64> {
        let traj = integrate(&setup.b0, f, &setup.kernels, setup.t_f, setup.n_steps)?;
        let predicted =
            partial_moments(&traj, &setup.observations.bin_edges, &setup.observations.times)?;
        let mut j = 0.0;
        for (pred_row, obs_row) in predicted.iter().zip(&setup.observations.counts) {
            for (p, o) in pred_row.iter().zip(obs_row) {
                let r = p - o;
                j += r * r;
            }
        }
        Ok(j)
    };
    run().map_err(|e| Error::CostEvaluation {
        source: Box::new(e),
        measure_json: f.to_json_string().unwrap_or_default(),
    })
}

/// Euclidean projection onto the probability simplex, by the exact
/// sorting algorithm: subtract the largest uniform shift that keeps the
/// thresholded vector summing to one.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "empty vector has no simplex projection");
    if v.len() == 1 {
        return vec![1.0];
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        acc += uk;
        let t = (acc - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn project_rows(weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    weights.iter().map(|row| simplex_project(row)).collect()
}

/// Lower-triangular cost gradient by central differences in each free
/// weight, the perturbed row re-projected onto its simplex before the
/// forward solve. Rows with a single admissible atom have no free weight
/// and get zero entries.
pub fn cost_gradient(
    f: &ConditionalMeasure,
    setup: &InverseSetup,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::invalid_input(format!("finite-difference step {h}")));
    }
    let weights = f.weights();
    let coords: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, row)| row.len() >= 2)
        .flat_map(|(l, row)| (0..row.len()).map(move |m| (l, m)))
        .collect();
    let entries: Vec<(usize, usize, f64)> = coords
        .par_iter()
        .map(|&(l, m)| {
            let scale = weights[l].iter().fold(0.0_f64, |a, &w| a.max(w.abs()));
            let hh = h * scale.max(1.0);
            let shifted = |sign: f64| {
                let mut row = weights[l].clone();
                row[m] += sign * hh;
                simplex_project(&row)
            };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            if plus == minus {
                return Err(Error::DegenerateStep { h: hh });
            }
            let eval = |row: Vec<f64>| -> Result<f64> {
                let mut w = weights.to_vec();
                w[l] = row;
                let probe = ConditionalMeasure::from_weights(
                    w,
                    f.daughter_grid(),
                    f.parent_grid(),
                    f.representation(),
                )?;
                cost(&probe, setup)
            };
            Ok((l, m, (eval(plus)? - eval(minus)?) / (2.0 * hh)))
        })
        .collect::<Result<_>>()?;
    let mut grad: Vec<Vec<f64>> = weights.iter().map(|row| vec![0.0; row.len()]).collect();
    for (l, m, g) in entries {
        grad[l][m] = g;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    /// Initial line-search step; later iterations warm-start from twice
    /// the previously accepted step.
    pub step_init: f64,
    /// Stop when the relative cost decrease falls below this.
    pub tol_cost: f64,
    /// Stop when the unit-step gradient-mapping norm falls below this.
    pub tol_grad: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo_sigma: f64,
    /// Absolute cost below which the problem counts as solved.
    pub cost_floor: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            step_init: 1.0,
            tol_cost: 1e-8,
            tol_grad: 1e-6,
            max_iters: 500,
            fd_step: 1e-5,
            armijo_sigma: 1e-4,
            cost_floor: 1e-18,
        }
    }
}

/// Result of one minimization run. `history` holds the cost after the
/// seed and after every accepted step, and never increases.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub measure: ConditionalMeasure,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

impl Estimate {
    pub fn cost_history_csv(&self) -> String {
        let mut out = String::from("iter,cost\n");
        for (i, c) in self.history.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", g17(*c)));
        }
        out
    }

    /// Writes the recovered measure as JSON and the cost history as a
    /// sidecar CSV.
    pub fn save(&self, measure_path: &Path, history_path: &Path) -> Result<()> {
        self.measure.save(measure_path)?;
        std::fs::write(history_path, self.cost_history_csv())?;
        Ok(())
    }
}

/// Projected-gradient descent with a backtracking (sufficient-decrease)
/// line search over the product of row simplices. Returns the best
/// feasible iterate seen.
pub fn minimize(
    setup: &InverseSetup,
    seed: &ConditionalMeasure,
    options: &MinimizeOptions,
) -> Result<Estimate> {
    if seed.daughter_grid() != setup.grid || seed.parent_grid() != setup.grid {
        return Err(Error::GridMismatch {
            reason: "seed measure does not live on the setup grid".into(),
        });
    }
    let rebuild = |w: Vec<Vec<f64>>| {
        ConditionalMeasure::from_weights(
            w,
            seed.daughter_grid(),
            seed.parent_grid(),
            seed.representation(),
        )
    };
    let mut current = seed.clone();
    let mut j = cost(&current, setup)?;
    let mut history = vec![j];
    let mut best = (current.clone(), j);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = options.step_init;
    if j <= options.cost_floor {
        converged = true;
    }
    while !converged && iterations < options.max_iters {
        let grad = cost_gradient(&current, setup, options.fd_step)?;
        // Unit-step gradient mapping: how far the projected step actually
        // moves; zero exactly at constrained stationary points.
        let mapped: Vec<Vec<f64>> = project_rows(
            &current
                .weights()
                .iter()
                .zip(&grad)
                .map(|(row, g)| row.iter().zip(g).map(|(w, gi)| w - gi).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        let gm_norm = current
            .weights()
            .iter()
            .zip(&mapped)
            .flat_map(|(row, m)| row.iter().zip(m).map(|(w, v)| (w - v) * (w - v)))
            .sum::<f64>()
            .sqrt();
        if gm_norm < options.tol_grad {
            converged = true;
            break;
        }
        let mut step = (2.0 * last_step).min(options.step_init * 1024.0);
        let mut accepted = None;
        for _ in 0..64 {
            let trial_w: Vec<Vec<f64>> = current
                .weights()
                .iter()
                .zip(&grad)
                .map(|(row, g)| {
                    simplex_project(
                        &row.iter().zip(g).map(|(w, gi)| w - step * gi).collect::<Vec<f64>>(),
                    )
                })
                .collect();
            let dist2: f64 = current
                .weights()
                .iter()
                .zip(&trial_w)
                .flat_map(|(row, t)| row.iter().zip(t).map(|(w, v)| (w - v) * (w - v)))
                .sum();
            if dist2 == 0.0 {
                step *= 0.5;
                continue;
            }
            let trial = rebuild(trial_w)?;
            let jt = cost(&trial, setup)?;
            if jt <= j - options.armijo_sigma / step * dist2 {
                accepted = Some((trial, jt));
                last_step = step;
                break;
            }
            step *= 0.5;
        }
        let Some((next, jn)) = accepted else {
            break;
        };
        current = next;
        let prev = j;
        j = jn;
        history.push(j);
        iterations += 1;
        if j < best.1 {
            best = (current.clone(), j);
        }
        if j <= options.cost_floor
            || (prev - j) <= options.tol_cost * prev.max(f64::MIN_POSITIVE)
        {
            converged = true;
        }
    }
    Ok(Estimate {
        measure: best.0,
        cost: best.1,
        iterations,
        converged,
        history,
    })
}

/// Forward-solves the truth measure, bins the trajectory, and overlays
/// seeded Gaussian noise (row-major over times, then bins). With
/// `sigma = 0` no generator is consulted and no seed is recorded.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_observations(
    truth: &ConditionalMeasure,
    kernels: &KernelSet,
    b0: &SizeDistribution,
    t_f: f64,
    n_steps: usize,
    bin_edges: &[f64],
    sample_times: &[f64],
    sigma: f64,
    rng_seed: u64,
) -> Result<ObservationSet> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid_input(format!("sigma = {sigma}")));
    }
    let traj = integrate(b0, truth, kernels, t_f, n_steps)?;
    let mut counts = partial_moments(&traj, bin_edges, sample_times)?;
    if sigma > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = rand_distr::Normal::new(0.0, sigma)
            .map_err(|e| Error::invalid_input(format!("noise distribution: {e}")))?;
        for row in counts.iter_mut() {
            for v in row.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let set = ObservationSet {
        counts,
        bin_edges: bin_edges.to_vec(),
        times: sample_times.to_vec(),
        noise_sigma: sigma,
        rng_seed: (sigma > 0.0).then_some(rng_seed),
    };
    set.validate()?;
    Ok(set)
}

/// Per-size errors and costs of a refinement study, with the greedy
/// strictly-decreasing subsequence flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub n_values: Vec<usize>,
    pub errors: Vec<f64>,
    pub costs: Vec<f64>,
    pub subsequence_flags: Vec<bool>,
}

impl ErrorCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,error,cost,flagged\n");
        for i in 0..self.n_values.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.n_values[i],
                g17(self.errors[i]),
                g17(self.costs[i]),
                u8::from(self.subsequence_flags[i])
            ));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut curve = ErrorCurve {
            n_values: Vec::new(),
            errors: Vec::new(),
            costs: Vec::new(),
            subsequence_flags: Vec::new(),
        };
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 {
                if line != "N,error,cost,flagged" {
                    return Err(Error::Parse { line: 1, reason: format!("bad header {line:?}") });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: idx + 1,
                    reason: format!("{} fields, expected 4", fields.len()),
                });
            }
            let bad = |s: &str| Error::Parse { line: idx + 1, reason: format!("{s:?}") };
            curve.n_values.push(fields[0].parse().map_err(|_| bad(fields[0]))?);
            curve.errors.push(fields[1].parse().map_err(|_| bad(fields[1]))?);
            curve.costs.push(fields[2].parse().map_err(|_| bad(fields[2]))?);
            curve.subsequence_flags.push(match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(bad(other)),
            });
        }
        Ok(curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Greedy selection: keep the first value and every later value strictly
/// below the last kept one.
pub fn flag_decreasing_subsequence(errors: &[f64]) -> Vec<bool> {
    let mut flags = Vec::with_capacity(errors.len());
    let mut last: Option<f64> = None;
    for &e in errors {
        let keep = match last {
            None => true,
            Some(prev) => e < prev,
        };
        if keep {
            last = Some(e);
        }
        flags.push(keep);
    }
    flags
}

/// Model pieces shared by all legs of a refinement study.
pub struct StudyModel<'a> {
    pub kernels: &'a KernelSet,
    pub b0: &'a (dyn Fn(f64) -> f64 + Sync),
    pub t_f: f64,
    pub n_steps: usize,
    pub options: MinimizeOptions,
    /// Atom count of the common error-measurement grid.
    pub reference_atoms: usize,
}

/// One leg of a study: recovered estimate or recorded failure.
#[derive(Debug)]
pub struct StudyOutcome {
    pub curve: ErrorCurve,
    pub estimates: Vec<(usize, Estimate)>,
    pub failures: Vec<(usize, String)>,
    /// The truth resampled on the reference grid, for error surfaces.
    pub reference_truth: ConditionalMeasure,
}

/// Runs the full refinement study: per grid size, synthesize data from
/// the truth on that grid, minimize from the uniform seed, and measure
/// the uniform distance to the truth on the common reference grid. Leg
/// failures are recorded and the study continues; the curve holds the
/// successful legs.
pub fn refinement_study(
    truth: &(dyn Fn(usize, usize) -> Result<ConditionalMeasure> + Sync),
    n_values: &[usize],
    sigma: f64,
    rng_seed: u64,
    model: &StudyModel,
) -> Result<StudyOutcome> {
    if n_values.is_empty() {
        return Err(Error::invalid_input("no grid sizes requested"));
    }
    for w in n_values.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::invalid_input("grid sizes must be increasing"));
        }
    }
    if n_values[0] < 2 {
        return Err(Error::invalid_input("grid sizes must be at least 2"));
    }
    let xm = model.kernels.x_max();
    let reference_truth = truth(model.reference_atoms, model.reference_atoms)?;
    let ref_grid = Grid::new(model.reference_atoms, xm)?;
    let mut curve = ErrorCurve {
        n_values: Vec::new(),
        errors: Vec::new(),
        costs: Vec::new(),
        subsequence_flags: Vec::new(),
    };
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for &n in n_values {
        let leg = || -> Result<(Estimate, f64)> {
            let grid = Grid::new(n, xm)?;
            let truth_n = truth(n, n)?;
            let b0 = project(model.b0, grid)?;
            let bin_edges: Vec<f64> = (0..=n).map(|j| grid.node(j)).collect();
            let n_t = n + 40;
            let times: Vec<f64> =
                (1..=n_t).map(|i| model.t_f * i as f64 / n_t as f64).collect();
            let observations = synthesize_observations(
                &truth_n,
                model.kernels,
                &b0,
                model.t_f,
                model.n_steps,
                &bin_edges,
                &times,
                sigma,
                rng_seed.wrapping_add(n as u64),
            )?;
            let setup = InverseSetup::new(
                grid,
                model.kernels.clone(),
                b0,
                model.t_f,
                model.n_steps,
                observations,
            )?;
            let seed = ConditionalMeasure::uniform(n, n, xm)?;
            let est = minimize(&setup, &seed, &model.options)?;
            let est_ref = est.measure.resample(ref_grid, ref_grid)?;
            let err =
                conditional_distance(&est_ref, &reference_truth, MetricMode::Kolmogorov)?;
            Ok((est, err))
        };
        match leg() {
            Ok((est, err)) => {
                curve.n_values.push(n);
                curve.errors.push(err);
                curve.costs.push(est.cost);
                estimates.push((n, est));
            }
            Err(e) => failures.push((n, e.to_string())),
        }
    }
    curve.subsequence_flags = flag_decreasing_subsequence(&curve.errors);
    Ok(StudyOutcome { curve, estimates, failures, reference_truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Representation;
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid {
        Grid::new(n, 1.0).unwrap()
    }

    fn smooth_symmetric_measure(n: usize) -> ConditionalMeasure {
        let cdf = |u: f64| 3.0 * u * u - 2.0 * u * u * u;
        let rows: Vec<Vec<f64>> = (1..=n)
            .map(|l| {
                (1..=l)
                    .map(|m| cdf(m as f64 / l as f64) - cdf((m - 1) as f64 / l as f64))
                    .collect()
            })
            .collect();
        ConditionalMeasure::from_weights(rows, grid(n), grid(n), Representation::AtomicCdf)
            .unwrap()
    }

    fn reference_kernels() -> KernelSet {
        KernelSet::builtin(1e-6, 0.1, 0.1, 1.0).unwrap()
    }

    fn small_setup(n: usize, truth: &ConditionalMeasure, sigma: f64) -> InverseSetup {
        let g = grid(n);
        let b0 = project(|x| 1e3 * (-x).exp(), g).unwrap();
        let edges: Vec<f64> = (0..=n).map(|j| g.node(j)).collect();
        let n_t = n + 4;
        let times: Vec<f64> = (1..=n_t).map(|i| i as f64 / n_t as f64).collect();
        let k = reference_kernels();
        let obs = synthesize_observations(truth, &k, &b0, 1.0, 60, &edges, &times, sigma, 7)
            .unwrap();
        InverseSetup::new(g, k, b0, 1.0, 60, obs).unwrap()
    }

    #[test]
    fn simplex_projection_matches_known_points() {
        assert_eq!(simplex_project(&[0.6, 0.6]), vec![0.5, 0.5]);
        assert_eq!(simplex_project(&[2.0, -1.0]), vec![1.0, 0.0]);
        assert_eq!(simplex_project(&[0.3, 0.7]), vec![0.3, 0.7]);
        assert_eq!(simplex_project(&[-5.0]), vec![1.0]);

        // Brute-force check on the 1-simplex: no feasible point is closer.
        let v = [0.6, 0.6];
        let p = simplex_project(&v);
        let dp = (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2);
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            let dq = (v[0] - t).powi(2) + (v[1] - (1.0 - t)).powi(2);
            assert!(dp <= dq + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn simplex_projection_is_feasible_and_euclidean_nearest(
            v in proptest::collection::vec(-2.0f64..2.0, 1..7),
            q_raw in proptest::collection::vec(0.0f64..1.0, 7),
        ) {
            let p = simplex_project(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            // Any feasible competitor is at least as far from v.
            let mut q: Vec<f64> = q_raw[..v.len()].to_vec();
            let qs: f64 = q.iter().sum();
            if qs > 0.0 {
                q.iter_mut().for_each(|x| *x /= qs);
                let d = |a: &[f64]| -> f64 {
                    a.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum()
                };
                prop_assert!(d(&p) <= d(&q) + 1e-9);
            }
        }
    }

    #[test]
    fn observations_round_trip_through_their_files() {
        let truth = smooth_symmetric_measure(4);
        let g = grid(4);
        let b0 = project(|x| 1e3 * (-x).exp(), g).unwrap();
        let k = reference_kernels();
        let edges: Vec<f64> = (0..=4).map(|j| g.node(j)).collect();
        let times = [0.25, 0.5, 0.75, 1.0];
        let obs =
            synthesize_observations(&truth, &k, &b0, 1.0, 40, &edges, &times, 0.3, 99).unwrap();
        assert_eq!(obs.rng_seed, Some(99));
        let dir = std::env::temp_dir().join("floc-obs-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("obs.csv");
        let meta = dir.join("obs.json");
        obs.save(&csv, &meta).unwrap();
        let back = ObservationSet::load(&csv, &meta).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn noise_is_reproducible_and_absent_at_sigma_zero() {
        let truth = smooth_symmetric_measure(4);
        let g = grid(4);
        let b0 = project(|x| 1e3 * (-x).exp(), g).unwrap();
        let k = reference_kernels();
        let edges: Vec<f64> = (0..=4).map(|j| g.node(j)).collect();
        let times = [0.5, 1.0];
        let a = synthesize_observations(&truth, &k, &b0, 1.0, 40, &edges, &times, 0.2, 5)
            .unwrap();
        let b = synthesize_observations(&truth, &k, &b0, 1.0, 40, &edges, &times, 0.2, 5)
            .unwrap();
        assert_eq!(a, b);
        let c = synthesize_observations(&truth, &k, &b0, 1.0, 40, &edges, &times, 0.0, 5)
            .unwrap();
        assert_eq!(c.rng_seed, None);
        let traj = integrate(&b0, &truth, &k, 1.0, 40).unwrap();
        assert_eq!(c.counts, partial_moments(&traj, &edges, &times).unwrap());
    }

    #[test]
    fn cost_is_zero_at_the_generating_measure_and_shifts_quadratically() {
        let truth = smooth_symmetric_measure(4);
        let setup = small_setup(4, &truth, 0.0);
        let j = cost(&truth, &setup).unwrap();
        assert!(j <= 1e-18, "cost {j}");
        assert_eq!(cost(&truth, &setup).unwrap(), j);

        let c = 0.5;
        let mut shifted = setup.observations().clone();
        for row in shifted.counts.iter_mut() {
            for v in row.iter_mut() {
                *v += c;
            }
        }
        let setup2 = InverseSetup::new(
            setup.grid(),
            setup.kernels().clone(),
            setup.b0().clone(),
            setup.t_f(),
            setup.n_steps(),
            shifted,
        )
        .unwrap();
        let j2 = cost(&truth, &setup2).unwrap();
        let entries = (setup.bin_edges().len() - 1) * setup.sample_times().len();
        let expect = entries as f64 * c * c;
        assert!((j2 - expect).abs() <= 1e-10 * expect, "{j2} vs {expect}");
    }

    #[test]
    fn cost_attaches_the_offending_measure_on_forward_failure() {
        let truth = smooth_symmetric_measure(4);
        let setup = small_setup(4, &truth, 0.0);
        let wrong = smooth_symmetric_measure(5);
        match cost(&wrong, &setup) {
            Err(Error::CostEvaluation { measure_json, .. }) => {
                assert!(measure_json.contains("\"m\": 5"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_is_small_at_the_minimum_and_lower_triangular() {
        let truth = smooth_symmetric_measure(4);
        let setup = small_setup(4, &truth, 0.0);
        let g_min = cost_gradient(&truth, &setup, 1e-5).unwrap();
        let seed = ConditionalMeasure::uniform(4, 4, 1.0).unwrap();
        let g_seed = cost_gradient(&seed, &setup, 1e-5).unwrap();
        let sup = |g: &[Vec<f64>]| {
            g.iter().flat_map(|r| r.iter()).fold(0.0_f64, |a, &v| a.max(v.abs()))
        };
        assert!(sup(&g_min) <= 1e-3 * sup(&g_seed), "{} vs {}", sup(&g_min), sup(&g_seed));
        // Shape mirrors the admissible prefixes; row 1 has no free weight.
        assert_eq!(g_min.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(g_min[0][0], 0.0);
        assert!(matches!(
            cost_gradient(&seed, &setup, 1e-300),
            Err(Error::DegenerateStep { .. })
        ));
    }

    #[test]
    fn gradient_matches_a_secant_along_feasible_directions() {
        let truth = smooth_symmetric_measure(4);
        let setup = small_setup(4, &truth, 0.0);
        let point = ConditionalMeasure::uniform(4, 4, 1.0).unwrap();
        let h = 1e-5;
        let grad = cost_gradient(&point, &setup, h).unwrap();
        // Perturb one free coordinate the same way the gradient does and
        // compare against a one-sided secant at a coarser scale, so the
        // two computations share no arithmetic.
        let (l, m) = (3usize, 1usize);
        let t = 1e-4;
        let eval = |delta: f64| -> f64 {
            let mut w = point.weights().to_vec();
            w[l][m] += delta;
            w[l] = simplex_project(&w[l]);
            let probe = ConditionalMeasure::from_weights(
                w,
                point.daughter_grid(),
                point.parent_grid(),
                point.representation(),
            )
            .unwrap();
            cost(&probe, &setup).unwrap()
        };
        let secant = (eval(t) - eval(0.0)) / t;
        let rel = (grad[l][m] - secant).abs() / secant.abs().max(1e-12);
        assert!(rel <= 5e-2, "gradient {} vs secant {secant}", grad[l][m]);
    }

    #[test]
    fn minimize_converges_immediately_when_seeded_at_the_minimum() {
        let truth = smooth_symmetric_measure(4);
        let setup = small_setup(4, &truth, 0.0);
        let est = minimize(&setup, &truth, &MinimizeOptions::default()).unwrap();
        assert!(est.converged);
        assert!(est.iterations <= 2);
        assert!(est.cost <= 1e-18);
        assert_eq!(est.measure.weights(), truth.weights());
    }

    #[test]
    fn minimize_descends_from_the_uniform_seed() {
        let truth = smooth_symmetric_measure(5);
        let setup = small_setup(5, &truth, 0.0);
        let seed = ConditionalMeasure::uniform(5, 5, 1.0).unwrap();
        let opts = MinimizeOptions { max_iters: 25, ..MinimizeOptions::default() };
        let est = minimize(&setup, &seed, &opts).unwrap();
        let j0 = est.history[0];
        assert!(est.cost < 0.2 * j0, "cost {} from {j0}", est.cost);
        for w in est.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        // Feasibility of the result is enforced by reconstruction.
        for (l, row) in est.measure.weights().iter().enumerate() {
            assert_eq!(row.len(), l + 1);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let wrong_seed = ConditionalMeasure::uniform(6, 6, 1.0).unwrap();
        assert!(minimize(&setup, &wrong_seed, &opts).is_err());
    }

    #[test]
    fn error_curve_round_trips_and_flags_greedily() {
        let flags = flag_decreasing_subsequence(&[0.9, 0.95, 0.7, 0.8, 0.6]);
        assert_eq!(flags, vec![true, false, true, false, true]);
        let curve = ErrorCurve {
            n_values: vec![5, 10, 15],
            errors: vec![0.9, 0.7, 0.6],
            costs: vec![1.5, 0.3, 0.1],
            subsequence_flags: vec![true, true, true],
        };
        let text = curve.to_csv();
        assert!(text.starts_with("N,error,cost,flagged\n"));
        assert_eq!(ErrorCurve::from_csv_str(&text).unwrap(), curve);
        assert!(ErrorCurve::from_csv_str("bogus\n1,2,3,4\n").is_err());
    }

    #[test]
    fn single_size_study_produces_one_flagged_point() {
        let k = reference_kernels();
        let b0 = |x: f64| 1e3 * (-x).exp();
        let model = StudyModel {
            kernels: &k,
            b0: &b0,
            t_f: 1.0,
            n_steps: 40,
            options: MinimizeOptions { max_iters: 3, ..MinimizeOptions::default() },
            reference_atoms: 60,
        };
        let truth = |m: usize, l: usize| -> Result<ConditionalMeasure> {
            let cdf = |u: f64| 3.0 * u * u - 2.0 * u * u * u;
            let rows: Vec<Vec<f64>> = (1..=l)
                .map(|row| {
                    let adm = row * m / l;
                    (1..=adm)
                        .map(|j| {
                            let y = row as f64 / l as f64;
                            let u = |q: f64| (q / y).min(1.0);
                            cdf(u(j as f64 / m as f64)) - cdf(u((j - 1) as f64 / m as f64))
                        })
                        .collect()
                })
                .collect();
            ConditionalMeasure::from_weights(
                rows,
                Grid::new(m, 1.0)?,
                Grid::new(l, 1.0)?,
                Representation::AtomicCdf,
            )
        };
        let out = refinement_study(&truth, &[5], 0.0, 11, &model).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.curve.n_values, vec![5]);
        assert_eq!(out.curve.subsequence_flags, vec![true]);
        assert!(out.curve.errors[0] > 0.0);
        assert!(refinement_study(&truth, &[], 0.0, 11, &model).is_err());
        assert!(refinement_study(&truth, &[10, 5], 0.0, 11, &model).is_err());
    }
}
