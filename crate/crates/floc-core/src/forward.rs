//! Forward solver: the semi-discrete population balance system and its
//! time integration.
//!
//! States are piecewise-constant size distributions on a [`Grid`]. The
//! right-hand side has three parts: binary aggregation (gain by pairing,
//! loss by collision), fragmentation driven by a conditional daughter
//! measure (gain from larger parents, loss at half the fragmentation
//! rate), and removal. Kernels are evaluated at cell right endpoints. Time
//! stepping is fixed-step classical Runge-Kutta.

// Indexed loops here walk several arrays in lockstep.
#![allow(clippy::needless_range_loop)]

use std::path::Path;

use crate::domain::{Grid, KernelSet, SizeDistribution};
use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::measures::ConditionalMeasure;

/// Aggregation part of the right-hand side.
///
/// Component `i` gains half the paired collision products of smaller
/// cells and loses collisions of cell `i` with any partner small enough
/// that the product stays in the domain. The first cell has no gain, the
/// last no loss.
pub fn aggregation_rhs(b: &SizeDistribution, k: &KernelSet) -> Result<Vec<f64>> {
    let tables = Tables::new(b.grid(), None, k)?;
    let mut out = vec![0.0; b.grid().n_cells()];
    tables.aggregation_into(b.values(), &mut out);
    Ok(out)
}

/// Fragmentation and removal parts of the right-hand side.
///
/// Component `i` gains daughter mass from every strictly larger parent
/// cell `j` weighted by the parent's fragmentation rate and the measure
/// weight of atom `i` in row `j`, and loses half its own fragmentation
/// rate plus removal.
pub fn breakage_removal_rhs(
    b: &SizeDistribution,
    gamma: &ConditionalMeasure,
    k: &KernelSet,
) -> Result<Vec<f64>> {
    let tables = Tables::new(b.grid(), Some(gamma), k)?;
    let mut out = vec![0.0; b.grid().n_cells()];
    tables.breakage_removal_into(b.values(), &mut out);
    Ok(out)
}

/// Full right-hand side: aggregation plus fragmentation plus removal.
pub fn rhs(
    b: &SizeDistribution,
    gamma: &ConditionalMeasure,
    k: &KernelSet,
) -> Result<Vec<f64>> {
    let tables = Tables::new(b.grid(), Some(gamma), k)?;
    let mut out = vec![0.0; b.grid().n_cells()];
    tables.rhs_into(b.values(), &mut out);
    Ok(out)
}

/// Kernel and measure values frozen on the grid so the inner loops touch
/// no closures.
struct Tables {
    n: usize,
    dx: f64,
    /// `ka[(i-1)*n + (j-1)] = k_a(x_i, x_j)`, zero where truncated.
    ka: Vec<f64>,
    kf: Vec<f64>,
    mu: Vec<f64>,
    /// `weights[j-1][i-1]`: measure weight of daughter atom `i` under
    /// parent cell `j`; empty when no measure is attached.
    weights: Vec<Vec<f64>>,
}

impl Tables {
    fn new(grid: Grid, gamma: Option<&ConditionalMeasure>, k: &KernelSet) -> Result<Self> {
        if grid.x_max() != k.x_max() {
            return Err(Error::IncompatibleDomains {
                reason: format!("grid x_max {} vs kernel x_max {}", grid.x_max(), k.x_max()),
            });
        }
        let n = grid.n_cells();
        if let Some(g) = gamma {
            if g.daughter_grid() != grid || g.parent_grid() != grid {
                return Err(Error::GridMismatch {
                    reason: format!(
                        "measure atoms {}x{} do not match the {}-cell solver grid",
                        g.daughter_grid().n_cells(),
                        g.parent_grid().n_cells(),
                        n
                    ),
                });
            }
        }
        let nodes: Vec<f64> = (1..=n).map(|j| grid.node(j)).collect();
        let mut ka = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                ka[i * n + j] = k.k_a(nodes[i], nodes[j]);
            }
        }
        let kf: Vec<f64> = nodes.iter().map(|&x| k.k_f(x)).collect();
        let mu: Vec<f64> = nodes.iter().map(|&x| k.mu(x)).collect();
        let weights = match gamma {
            Some(g) => g.weights().to_vec(),
            None => Vec::new(),
        };
        Ok(Tables { n, dx: grid.dx(), ka, kf, mu, weights })
    }

    fn aggregation_into(&self, a: &[f64], out: &mut [f64]) {
        let (n, dx) = (self.n, self.dx);
        for i in 0..n {
            // Pair gain: cells j and i-j (1-based i+1, j+1) merging into i.
            let mut gain = 0.0;
            for j in 0..i {
                gain += self.ka[j * n + (i - 1 - j)] * a[j] * a[i - 1 - j];
            }
            let mut loss = 0.0;
            for j in 0..n - 1 - i {
                loss += self.ka[i * n + j] * a[j];
            }
            out[i] = 0.5 * gain * dx - a[i] * loss * dx;
        }
    }

    fn breakage_removal_into(&self, a: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            // Daughter gain from strictly larger parents; the measure weight
            // is a cell density times dx, so the quadrature dx cancels.
            let mut gain = 0.0;
            for j in i + 1..n {
                gain += self.weights[j][i] * self.kf[j] * a[j];
            }
            out[i] = gain - 0.5 * self.kf[i] * a[i] - self.mu[i] * a[i];
        }
    }

    fn rhs_into(&self, a: &[f64], out: &mut [f64]) {
        let (n, dx) = (self.n, self.dx);
        for i in 0..n {
            let mut gain = 0.0;
            for j in 0..i {
                gain += self.ka[j * n + (i - 1 - j)] * a[j] * a[i - 1 - j];
            }
            let mut loss = 0.0;
            for j in 0..n - 1 - i {
                loss += self.ka[i * n + j] * a[j];
            }
            let mut frag = 0.0;
            for j in i + 1..n {
                frag += self.weights[j][i] * self.kf[j] * a[j];
            }
            out[i] = 0.5 * gain * dx - a[i] * loss * dx + frag
                - 0.5 * self.kf[i] * a[i]
                - self.mu[i] * a[i];
        }
    }
}

/// Solution of one forward run: states stored at a subset of the uniform
/// time steps, always including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Grid,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn final_state(&self) -> SizeDistribution {
        SizeDistribution::new(self.grid, self.states.last().expect("nonempty").clone())
            .expect("stored states are finite")
    }

    /// State at time `t`, linearly interpolated between stored steps.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        let (t0, t1) = (self.times[0], *self.times.last().expect("nonempty"));
        if !t.is_finite() || t < t0 || t > t1 {
            return Err(Error::invalid_input(format!(
                "sample time {t} outside the trajectory span [{t0}, {t1}]"
            )));
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return Ok(self.states[0].clone());
        }
        if k == self.times.len() {
            return Ok(self.states[k - 1].clone());
        }
        let (ta, tb) = (self.times[k - 1], self.times[k]);
        let w = (t - ta) / (tb - ta);
        Ok(self.states[k - 1]
            .iter()
            .zip(&self.states[k])
            .map(|(&a, &b)| (1.0 - w) * a + w * b)
            .collect())
    }

    pub fn to_csv(&self) -> String {
        let n = self.grid.n_cells();
        let mut out = String::from("t");
        for j in 1..=n {
            out.push_str(&format!(",x_{j}"));
        }
        out.push('\n');
        for (t, state) in self.times.iter().zip(&self.states) {
            out.push_str(&g17(*t));
            for v in state {
                out.push(',');
                out.push_str(&g17(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses the CSV emitted by [`Trajectory::to_csv`]. The domain length
    /// is not stored in the file and must be supplied.
    pub fn from_csv_str(text: &str, x_max: f64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, reason: "empty file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(Error::Parse { line: 1, reason: format!("bad header {header:?}") });
        }
        let n = cols.len() - 1;
        let grid = Grid::new(n, x_max)?;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    reason: format!("{s:?}: {e}"),
                })
            };
            let t = parse(fields.next().unwrap_or(""))?;
            let row: Vec<f64> = fields.map(parse).collect::<Result<_>>()?;
            if row.len() != n {
                return Err(Error::Parse {
                    line: idx + 1,
                    reason: format!("{} values, expected {n}", row.len()),
                });
            }
            times.push(t);
            states.push(row);
        }
        if states.is_empty() {
            return Err(Error::Parse { line: 2, reason: "no data rows".into() });
        }
        Ok(Trajectory { grid, times, states })
    }
}

/// Integrates the population balance system with classical fixed-step
/// fourth-order Runge-Kutta, storing every step.
///
/// `t_f = 0` returns the initial state alone. A non-finite component
/// aborts with the 1-based step index.
pub fn integrate(
    b0: &SizeDistribution,
    gamma: &ConditionalMeasure,
    k: &KernelSet,
    t_f: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    integrate_strided(b0, gamma, k, t_f, n_steps, 1)
}

/// As [`integrate`], but keeping only every `stride`-th step (endpoints
/// always included).
pub fn integrate_strided(
    b0: &SizeDistribution,
    gamma: &ConditionalMeasure,
    k: &KernelSet,
    t_f: f64,
    n_steps: usize,
    stride: usize,
) -> Result<Trajectory> {
    if !t_f.is_finite() || t_f < 0.0 {
        return Err(Error::invalid_input(format!("t_f = {t_f}")));
    }
    let grid = b0.grid();
    let tables = Tables::new(grid, Some(gamma), k)?;
    if t_f == 0.0 {
        return Ok(Trajectory {
            grid,
            times: vec![0.0],
            states: vec![b0.values().to_vec()],
        });
    }
    if n_steps == 0 || stride == 0 {
        return Err(Error::invalid_input(format!(
            "n_steps = {n_steps}, stride = {stride}"
        )));
    }
    let n = grid.n_cells();
    let h = t_f / n_steps as f64;
    let mut y = b0.values().to_vec();
    let mut times = vec![0.0];
    let mut states = vec![y.clone()];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    for step in 1..=n_steps {
        tables.rhs_into(&y, &mut k1);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * h * k1[i];
        }
        tables.rhs_into(&stage, &mut k2);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * h * k2[i];
        }
        tables.rhs_into(&stage, &mut k3);
        for i in 0..n {
            stage[i] = y[i] + h * k3[i];
        }
        tables.rhs_into(&stage, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step });
        }
        if step % stride == 0 || step == n_steps {
            // Recomputed, not accumulated, so endpoints are exact.
            times.push(t_f * step as f64 / n_steps as f64);
            states.push(y.clone());
        }
    }
    Ok(Trajectory { grid, times, states })
}

/// Binned particle counts: entry `(i, j)` is the exact integral of the
/// stored piecewise-constant state over bin `j` at sample time `i`, with
/// linear interpolation between stored steps. Rows follow `sample_times`.
pub fn partial_moments(
    traj: &Trajectory,
    bin_edges: &[f64],
    sample_times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let grid = traj.grid();
    let xm = grid.x_max();
    if bin_edges.len() < 2 {
        return Err(Error::invalid_input("fewer than two bin edges"));
    }
    for w in bin_edges.windows(2) {
        // !(a < b) rather than b <= a: it also rejects NaN edges.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(w[0] < w[1]) {
            return Err(Error::invalid_input(format!(
                "bin edges not increasing at {} >= {}",
                w[0], w[1]
            )));
        }
    }
    let (first, last) = (bin_edges[0], *bin_edges.last().expect("nonempty"));
    if !first.is_finite() || first < 0.0 || last > xm {
        return Err(Error::invalid_input(format!(
            "bin edges [{first}, {last}] outside [0, {xm}]"
        )));
    }
    let mut counts = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        let state = traj.state_at(t)?;
        let mut row = Vec::with_capacity(bin_edges.len() - 1);
        for be in bin_edges.windows(2) {
            let mut acc = 0.0;
            for (m, &v) in state.iter().enumerate() {
                let lo = be[0].max(grid.node(m));
                let hi = be[1].min(grid.node(m + 1));
                if hi > lo {
                    acc += v * (hi - lo);
                }
            }
            row.push(acc);
        }
        counts.push(row);
    }
    Ok(counts)
}

/// A-priori constants for the right-hand side on a bounded state set:
/// `c0` bounds the states (both sup and integral norms), `c1` covers
/// aggregation plus removal, `c_frag` the fragmentation rate, and
/// `lipschitz_c` the full integral-norm Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticBounds {
    pub c0: f64,
    pub c1: f64,
    pub c_frag: f64,
    pub lipschitz_c: f64,
}

impl DiagnosticBounds {
    /// Bounds valid for all states whose sup and integral norms stay
    /// within `c0`.
    pub fn from_state_bound(c0: f64, k: &KernelSet, gamma: &ConditionalMeasure) -> Self {
        let c1 = 3.0 * c0 * k.sup_k_a() + k.sup_mu();
        let c_frag = k.sup_k_f();
        let lipschitz_c = c_frag * (0.5 + k.x_max() * gamma.max_density()) + c1;
        DiagnosticBounds { c0, c1, c_frag, lipschitz_c }
    }

    pub fn for_trajectory(traj: &Trajectory, k: &KernelSet, gamma: &ConditionalMeasure) -> Self {
        let dx = traj.grid().dx();
        let c0 = traj
            .states()
            .iter()
            .map(|s| {
                let sup = s.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
                let l1 = dx * s.iter().map(|v| v.abs()).sum::<f64>();
                sup.max(l1)
            })
            .fold(0.0_f64, f64::max);
        DiagnosticBounds::from_state_bound(c0, k, gamma)
    }
}
