//! Probability measures on the size domain and the metric suite used to
//! compare them.
//!
//! A [`FiniteMeasure`] is a finite atomic measure on `[0, x_max]`. A
//! [`ConditionalMeasure`] assigns to every parent size `y` a probability
//! measure over daughter sizes `x <= y`, stored as an atom grid of `M`
//! daughter locations crossed with `L` parent rows, lower triangular and
//! row stochastic. Metrics: Prohorov (bisection over a transport
//! feasibility check), Levy and Kolmogorov (exact from step CDFs), their
//! lift to conditional measures (sup over parent rows), and two set
//! distances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Grid;
use crate::error::{Error, Result};

/// Additive slack used when validating that measure rows sum to one.
pub const ROW_SUM_TOL: f64 = 1e-12;

const FEAS_SLACK: f64 = 1e-12;

/// How the stored weight array of a [`ConditionalMeasure`] is interpreted
/// on disk: point-mass weights, or cell densities with
/// `density * dx = weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "atomic-cdf")]
    AtomicCdf,
    #[serde(rename = "density")]
    Density,
}

/// Finite atomic probability measure: sorted atoms, merged duplicates,
/// strictly positive weights summing to one (within [`ROW_SUM_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMeasure {
    atoms: Vec<(f64, f64)>,
}

impl FiniteMeasure {
    pub fn new(atoms: &[(f64, f64)], x_max: f64) -> Result<Self> {
        if !x_max.is_finite() || x_max <= 0.0 {
            return Err(Error::invalid_input(format!("x_max = {x_max}")));
        }
        if atoms.is_empty() {
            return Err(Error::invalid_input("finite measure with no atoms"));
        }
        let mut total = 0.0;
        for &(loc, w) in atoms {
            if !loc.is_finite() || !w.is_finite() {
                return Err(Error::NonFinite { context: format!("atom ({loc}, {w})") });
            }
            if loc < 0.0 || loc > x_max {
                return Err(Error::invalid_input(format!(
                    "atom location {loc} outside [0, {x_max}]"
                )));
            }
            if w < 0.0 {
                return Err(Error::invalid_input(format!("negative atom weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid_input(format!("atom weights sum to {total}")));
        }
        let mut sorted: Vec<(f64, f64)> = atoms.iter().copied().filter(|&(_, w)| w > 0.0).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        for (loc, w) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == loc => last.1 += w,
                _ => merged.push((loc, w)),
            }
        }
        if merged.is_empty() {
            return Err(Error::invalid_input("all atom weights are zero"));
        }
        Ok(FiniteMeasure { atoms: merged })
    }

    pub fn dirac(loc: f64, x_max: f64) -> Result<Self> {
        FiniteMeasure::new(&[(loc, 1.0)], x_max)
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    fn step_cdf(&self) -> StepCdf {
        let mut locs = Vec::with_capacity(self.atoms.len());
        let mut cums = Vec::with_capacity(self.atoms.len());
        let mut acc = 0.0;
        for &(loc, w) in &self.atoms {
            acc += w;
            locs.push(loc);
            cums.push(acc);
        }
        StepCdf { locs, cums }
    }
}

struct StepCdf {
    locs: Vec<f64>,
    cums: Vec<f64>,
}

impl StepCdf {
    fn eval(&self, x: f64) -> f64 {
        let k = self.locs.partition_point(|&l| l <= x);
        if k == 0 {
            0.0
        } else {
            self.cums[k - 1]
        }
    }
}

/// Conditional probability measure on an `M x L` atom grid over
/// `[0, x_max]^2`.
///
/// Parent row `l` covers sizes in `(node(l-1), node(l)]` of the parent grid;
/// its daughter measure puts weight only on daughter atoms `q_m <= q_l`
/// (lower triangularity) and sums to one (row stochasticity).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMeasure {
    daughter: Grid,
    parent: Grid,
    representation: Representation,
    /// `weights[l-1]` holds the admissible prefix of parent row `l`.
    weights: Vec<Vec<f64>>,
}

/// Number of admissible daughter atoms in parent row `l`: the atoms with
/// `q_m <= q_l`, computed in integer arithmetic.
pub fn admissible_atoms(l: usize, m_atoms: usize, l_rows: usize) -> usize {
    l * m_atoms / l_rows
}

impl ConditionalMeasure {
    /// Builds a measure from row-major lower-triangular weights. Row `l`
    /// must contain exactly the admissible atom count for that row. The
    /// first violated row is reported on error.
    pub fn from_weights(
        weights: Vec<Vec<f64>>,
        daughter: Grid,
        parent: Grid,
        representation: Representation,
    ) -> Result<Self> {
        if daughter.x_max() != parent.x_max() {
            return Err(Error::IncompatibleDomains {
                reason: format!(
                    "daughter x_max {} vs parent x_max {}",
                    daughter.x_max(),
                    parent.x_max()
                ),
            });
        }
        let (m, l_rows) = (daughter.n_cells(), parent.n_cells());
        if m < l_rows {
            return Err(Error::InvalidMeasure {
                row: 1,
                reason: format!("no admissible atom: {m} daughter atoms for {l_rows} rows"),
            });
        }
        if weights.len() != l_rows {
            return Err(Error::InvalidMeasure {
                row: 0,
                reason: format!("{} rows supplied, {l_rows} expected", weights.len()),
            });
        }
        for (idx, row) in weights.iter().enumerate() {
            let l = idx + 1;
            let want = admissible_atoms(l, m, l_rows);
            if row.len() != want {
                return Err(Error::InvalidMeasure {
                    row: l,
                    reason: format!("{} weights, {want} admissible atoms", row.len()),
                });
            }
            let mut sum = 0.0;
            for &w in row {
                if !w.is_finite() {
                    return Err(Error::InvalidMeasure { row: l, reason: format!("weight {w}") });
                }
                if w < 0.0 {
                    return Err(Error::InvalidMeasure {
                        row: l,
                        reason: format!("negative weight {w}"),
                    });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidMeasure {
                    row: l,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(ConditionalMeasure { daughter, parent, representation, weights })
    }

    /// Builds a measure from sampled density values `gamma[l-1][m-1]`. Rows
    /// may be given full length `M` (entries beyond the admissible prefix
    /// must be zero) or already truncated. Each admissible prefix is scaled
    /// by the atom spacing and renormalized to sum to one; a row with no
    /// mass is rejected.
    pub fn from_density(gamma: &[Vec<f64>], daughter: Grid, parent: Grid) -> Result<Self> {
        let (m, l_rows) = (daughter.n_cells(), parent.n_cells());
        if gamma.len() != l_rows {
            return Err(Error::InvalidMeasure {
                row: 0,
                reason: format!("{} rows supplied, {l_rows} expected", gamma.len()),
            });
        }
        let mut weights = Vec::with_capacity(l_rows);
        for (idx, row) in gamma.iter().enumerate() {
            let l = idx + 1;
            let adm = admissible_atoms(l, m, l_rows);
            if row.len() != adm && row.len() != m {
                return Err(Error::InvalidMeasure {
                    row: l,
                    reason: format!("{} density values, expected {adm} or {m}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidMeasure { row: l, reason: format!("value {v}") });
                }
                if v < 0.0 {
                    return Err(Error::InvalidMeasure {
                        row: l,
                        reason: format!("negative density {v}"),
                    });
                }
                if j >= adm && v != 0.0 {
                    return Err(Error::InvalidMeasure {
                        row: l,
                        reason: format!("mass above the parent size at atom {}", j + 1),
                    });
                }
            }
            let sum: f64 = row[..adm].iter().sum();
            if sum <= 0.0 {
                return Err(Error::InvalidMeasure { row: l, reason: "row has no mass".into() });
            }
            weights.push(row[..adm].iter().map(|v| v / sum).collect());
        }
        ConditionalMeasure::from_weights(weights, daughter, parent, Representation::Density)
    }

    /// The maximum-entropy seed: constant density on every admissible
    /// prefix.
    pub fn uniform(m_atoms: usize, l_rows: usize, x_max: f64) -> Result<Self> {
        let daughter = Grid::new(m_atoms, x_max)?;
        let parent = Grid::new(l_rows, x_max)?;
        let gamma: Vec<Vec<f64>> =
            (1..=l_rows).map(|l| vec![1.0; admissible_atoms(l, m_atoms, l_rows)]).collect();
        ConditionalMeasure::from_density(&gamma, daughter, parent)
    }

    pub fn daughter_grid(&self) -> Grid {
        self.daughter
    }

    pub fn parent_grid(&self) -> Grid {
        self.parent
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Admissible weight prefix of parent row `l` (1-based).
    pub fn row(&self, l: usize) -> &[f64] {
        &self.weights[l - 1]
    }

    /// 1-based parent row containing `y`; `y = 0` is assigned to row 1.
    pub fn row_of(&self, y: f64) -> Result<usize> {
        self.parent.cell_of(y)
    }

    pub fn row_measure(&self, l: usize) -> FiniteMeasure {
        let atoms: Vec<(f64, f64)> = self.weights[l - 1]
            .iter()
            .enumerate()
            .map(|(j, &w)| (self.daughter.node(j + 1), w))
            .collect();
        FiniteMeasure::new(&atoms, self.daughter.x_max()).expect("validated row")
    }

    /// Largest cell density `weight / dx` over all rows.
    pub fn max_density(&self) -> f64 {
        let dx = self.daughter.dx();
        self.weights
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0_f64, |acc, &w| acc.max(w / dx))
    }

    /// Right-continuous conditional CDF at `(x, y)`: the cumulative weight
    /// of the row containing `y` at daughter atoms `<= x`, equal to 1
    /// whenever `x >= y` (no daughter exceeds its parent) and for the
    /// degenerate parent `y = 0`.
    pub fn cdf(&self, x: f64, y: f64) -> Result<f64> {
        let xm = self.daughter.x_max();
        for (name, v) in [("x", x), ("y", y)] {
            if !v.is_finite() || v < 0.0 || v > xm {
                return Err(Error::invalid_input(format!("{name} = {v} outside [0, {xm}]")));
            }
        }
        if y == 0.0 || x >= y {
            return Ok(1.0);
        }
        let l = self.parent.cell_of(y)?;
        Ok(self.cum_below(l, x))
    }

    fn cum_below(&self, l: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &w) in self.weights[l - 1].iter().enumerate() {
            if self.daughter.node(j + 1) <= x {
                acc += w;
            } else {
                break;
            }
        }
        acc
    }

    /// Re-expresses the measure on another atom grid by taking CDF
    /// increments between the new atoms; mass between the last admissible
    /// atom of a row and its parent size is absorbed into that atom.
    pub fn resample(&self, daughter: Grid, parent: Grid) -> Result<ConditionalMeasure> {
        if daughter.x_max() != self.daughter.x_max() || parent.x_max() != self.parent.x_max() {
            return Err(Error::IncompatibleDomains {
                reason: "resample target has a different x_max".into(),
            });
        }
        let (m, l_rows) = (daughter.n_cells(), parent.n_cells());
        let mut weights = Vec::with_capacity(l_rows);
        for l in 1..=l_rows {
            let y = parent.node(l);
            let adm = admissible_atoms(l, m, l_rows);
            let mut row = Vec::with_capacity(adm);
            let mut below = 0.0;
            for mm in 1..adm {
                let c = self.cdf(daughter.node(mm), y)?;
                // CDF differences can round one ulp negative; weights must
                // not.
                row.push((c - below).max(0.0));
                below = c;
            }
            row.push((1.0 - below).max(0.0));
            weights.push(row);
        }
        ConditionalMeasure::from_weights(weights, daughter, parent, self.representation)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let dx = self.daughter.dx();
        let weights = match self.representation {
            Representation::AtomicCdf => self.weights.clone(),
            Representation::Density => self
                .weights
                .iter()
                .map(|row| row.iter().map(|w| w / dx).collect())
                .collect(),
        };
        let file = MeasureFile {
            x_max: self.daughter.x_max(),
            m: self.daughter.n_cells(),
            l: self.parent.n_cells(),
            representation: self.representation,
            weights,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(text)?;
        let daughter = Grid::new(file.m, file.x_max)?;
        let parent = Grid::new(file.l, file.x_max)?;
        let dx = daughter.dx();
        let weights = match file.representation {
            Representation::AtomicCdf => file.weights,
            Representation::Density => file
                .weights
                .iter()
                .map(|row| row.iter().map(|v| v * dx).collect())
                .collect(),
        };
        ConditionalMeasure::from_weights(weights, daughter, parent, file.representation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ConditionalMeasure::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    x_max: f64,
    m: usize,
    l: usize,
    representation: Representation,
    weights: Vec<Vec<f64>>,
}

/// Prohorov distance between two finite measures, by bisection on the
/// radius of a transport feasibility check (mass within distance `eps`
/// must cover all but `eps` of each side). The result is within `tol` of
/// the true distance and identical under argument swap.
pub fn prohorov(mu: &FiniteMeasure, nu: &FiniteMeasure, tol: f64) -> Result<f64> {
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::InvalidTolerance { value: tol });
    }
    let (a, b) = canonical_pair(mu, nu);
    if transport_feasible(a, b, 0.0) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if transport_feasible(a, b, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn canonical_pair<'a>(
    mu: &'a FiniteMeasure,
    nu: &'a FiniteMeasure,
) -> (&'a FiniteMeasure, &'a FiniteMeasure) {
    let order = mu
        .atoms
        .iter()
        .flat_map(|&(l, w)| [l, w])
        .partial_cmp(nu.atoms.iter().flat_map(|&(l, w)| [l, w]))
        .unwrap_or(std::cmp::Ordering::Equal);
    if order == std::cmp::Ordering::Greater {
        (nu, mu)
    } else {
        (mu, nu)
    }
}

/// Checks whether a coupling exists that keeps all but `eps` of the mass
/// within distance `eps`, via max flow on the admissibility graph.
fn transport_feasible(mu: &FiniteMeasure, nu: &FiniteMeasure, eps: f64) -> bool {
    let n = mu.atoms.len();
    let m = nu.atoms.len();
    let nodes = n + m + 2;
    let (src, snk) = (0, nodes - 1);
    let mut cap = vec![0.0_f64; nodes * nodes];
    for (i, &(_, w)) in mu.atoms.iter().enumerate() {
        cap[src * nodes + (1 + i)] = w;
    }
    for (j, &(_, w)) in nu.atoms.iter().enumerate() {
        cap[(1 + n + j) * nodes + snk] = w;
    }
    for (i, &(u, _)) in mu.atoms.iter().enumerate() {
        for (j, &(v, _)) in nu.atoms.iter().enumerate() {
            if (u - v).abs() <= eps {
                cap[(1 + i) * nodes + (1 + n + j)] = 2.0;
            }
        }
    }
    let flow = max_flow(&mut cap, nodes, src, snk);
    flow >= 1.0 - eps - FEAS_SLACK
}

/// Edmonds-Karp on a dense residual matrix. Small graphs only.
fn max_flow(cap: &mut [f64], nodes: usize, src: usize, snk: usize) -> f64 {
    const RESIDUAL_FLOOR: f64 = 1e-15;
    let mut total = 0.0;
    let mut parent = vec![usize::MAX; nodes];
    let mut queue = Vec::with_capacity(nodes);
    loop {
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        parent[src] = src;
        queue.clear();
        queue.push(src);
        let mut head = 0;
        while head < queue.len() && parent[snk] == usize::MAX {
            let u = queue[head];
            head += 1;
            for v in 0..nodes {
                if parent[v] == usize::MAX && cap[u * nodes + v] > RESIDUAL_FLOOR {
                    parent[v] = u;
                    queue.push(v);
                }
            }
        }
        if parent[snk] == usize::MAX {
            return total;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = snk;
        while v != src {
            let u = parent[v];
            bottleneck = bottleneck.min(cap[u * nodes + v]);
            v = u;
        }
        let mut v = snk;
        while v != src {
            let u = parent[v];
            cap[u * nodes + v] -= bottleneck;
            cap[v * nodes + u] += bottleneck;
            v = u;
        }
        total += bottleneck;
    }
}

/// Levy distance between two finite measures, computed exactly: the
/// optimum is one of finitely many atom-location or CDF-level differences,
/// and each candidate is checked against the diagonal band condition
/// `G(x - eps) - eps <= H(x) <= G(x + eps) + eps`.
pub fn levy(mu: &FiniteMeasure, nu: &FiniteMeasure) -> f64 {
    let f = mu.step_cdf();
    let g = nu.step_cdf();
    let mut candidates = vec![0.0_f64];
    for &u in &f.locs {
        for &v in &g.locs {
            candidates.push((u - v).abs());
        }
    }
    let mut levels_f = f.cums.clone();
    levels_f.push(0.0);
    let mut levels_g = g.cums.clone();
    levels_g.push(0.0);
    for &a in &levels_f {
        for &b in &levels_g {
            candidates.push((a - b).abs());
        }
    }
    candidates.retain(|c| c.is_finite());
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let feasible = |eps: f64| levy_one_side(&f, &g, eps) && levy_one_side(&g, &f, eps);
    let idx = candidates.partition_point(|&c| !feasible(c));
    candidates.get(idx).copied().unwrap_or(1.0)
}

/// True when `H(x) <= G(x + eps) + eps` for all `x`, checked at the
/// breakpoints of the right-continuous difference.
fn levy_one_side(h: &StepCdf, g: &StepCdf, eps: f64) -> bool {
    for &u in &h.locs {
        if h.eval(u) - g.eval(u + eps) > eps + FEAS_SLACK {
            return false;
        }
    }
    for &w in &g.locs {
        let x = w - eps;
        if h.eval(x) - g.eval(w) > eps + FEAS_SLACK {
            return false;
        }
    }
    true
}

/// Total-variation distance: half the summed absolute weight differences
/// over the merged support.
pub fn total_variation(mu: &FiniteMeasure, nu: &FiniteMeasure) -> f64 {
    let mut locs: Vec<f64> =
        mu.atoms.iter().chain(nu.atoms.iter()).map(|&(l, _)| l).collect();
    locs.sort_by(f64::total_cmp);
    locs.dedup();
    let weight_at = |m: &FiniteMeasure, x: f64| {
        m.atoms
            .iter()
            .find(|&&(l, _)| l == x)
            .map(|&(_, w)| w)
            .unwrap_or(0.0)
    };
    0.5 * locs
        .iter()
        .map(|&x| (weight_at(mu, x) - weight_at(nu, x)).abs())
        .sum::<f64>()
}

/// Which per-parent metric a conditional distance aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricMode {
    Prohorov { tol: f64 },
    Levy,
    Kolmogorov,
}

/// Uniform (Kolmogorov) distance between conditional measures: the largest
/// absolute difference of the conditional CDFs over all parents and
/// daughter atoms.
pub fn kolmogorov(f: &ConditionalMeasure, g: &ConditionalMeasure) -> Result<f64> {
    conditional_distance(f, g, MetricMode::Kolmogorov)
}

/// Sup over parent sizes of a per-parent metric between the two daughter
/// measures. Parent intervals of the two measures are merged, so the grids
/// may differ as long as they share `x_max`.
pub fn conditional_distance(
    f: &ConditionalMeasure,
    g: &ConditionalMeasure,
    mode: MetricMode,
) -> Result<f64> {
    let xm = f.daughter.x_max();
    if g.daughter.x_max() != xm {
        return Err(Error::IncompatibleDomains {
            reason: format!("x_max {} vs {}", xm, g.daughter.x_max()),
        });
    }
    if let MetricMode::Prohorov { tol } = mode {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(Error::InvalidTolerance { value: tol });
        }
    }
    let mut reps: Vec<f64> = (1..=f.parent.n_cells())
        .map(|l| f.parent.node(l))
        .chain((1..=g.parent.n_cells()).map(|l| g.parent.node(l)))
        .collect();
    reps.sort_by(f64::total_cmp);
    reps.dedup();
    let mut worst = 0.0_f64;
    for &y in &reps {
        let rf = f.parent.cell_of(y)?;
        let rg = g.parent.cell_of(y)?;
        let d = match mode {
            MetricMode::Kolmogorov => row_kolmogorov(f, rf, g, rg, y),
            MetricMode::Levy => levy(&f.row_measure(rf), &g.row_measure(rg)),
            MetricMode::Prohorov { tol } => {
                prohorov(&f.row_measure(rf), &g.row_measure(rg), tol)?
            }
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Largest CDF difference for one parent value `y`: a two-pointer sweep
/// over the merged daughter atoms strictly below `y` (at and above `y`
/// both conditional CDFs are 1).
fn row_kolmogorov(
    f: &ConditionalMeasure,
    rf: usize,
    g: &ConditionalMeasure,
    rg: usize,
    y: f64,
) -> f64 {
    let row_f = &f.weights[rf - 1];
    let row_g = &g.weights[rg - 1];
    let (mut i, mut j) = (0usize, 0usize);
    let (mut cf, mut cg) = (0.0_f64, 0.0_f64);
    let mut worst = 0.0_f64;
    loop {
        let xf = (i < row_f.len()).then(|| f.daughter.node(i + 1));
        let xg = (j < row_g.len()).then(|| g.daughter.node(j + 1));
        let x = match (xf, xg) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
        if x >= y {
            break;
        }
        while i < row_f.len() && f.daughter.node(i + 1) == x {
            cf += row_f[i];
            i += 1;
        }
        while j < row_g.len() && g.daughter.node(j + 1) == x {
            cg += row_g[j];
            j += 1;
        }
        worst = worst.max((cf - cg).abs());
    }
    worst
}

/// Largest pointwise conditional-CDF difference over a finite sample set.
/// Always dominated by the Kolmogorov conditional distance.
pub fn sampled_uniform_error(
    f: &ConditionalMeasure,
    g: &ConditionalMeasure,
    points: &[(f64, f64)],
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for &(x, y) in points {
        worst = worst.max((f.cdf(x, y)? - g.cdf(x, y)?).abs());
    }
    Ok(worst)
}

/// How a distance between two collections of conditional measures is
/// aggregated from pairwise distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetDistanceMode {
    /// Smallest pairwise distance between the collections.
    MinPair,
    /// Standard Hausdorff distance: largest distance from any element to
    /// the nearest element of the other collection.
    Hausdorff,
}

pub fn set_distance(
    a: &[ConditionalMeasure],
    b: &[ConditionalMeasure],
    set_mode: SetDistanceMode,
    metric_mode: MetricMode,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut table = vec![vec![0.0_f64; b.len()]; a.len()];
    for (i, fa) in a.iter().enumerate() {
        for (j, fb) in b.iter().enumerate() {
            table[i][j] = conditional_distance(fa, fb, metric_mode)?;
        }
    }
    let d = match set_mode {
        SetDistanceMode::MinPair => table
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(f64::INFINITY, f64::min),
        SetDistanceMode::Hausdorff => {
            let forward = table
                .iter()
                .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                .fold(0.0_f64, f64::max);
            let backward = (0..b.len())
                .map(|j| table.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
                .fold(0.0_f64, f64::max);
            forward.max(backward)
        }
    };
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new(n, 1.0).unwrap()
    }

    fn measure(weights: Vec<Vec<f64>>, n: usize) -> ConditionalMeasure {
        ConditionalMeasure::from_weights(weights, grid(n), grid(n), Representation::AtomicCdf)
            .unwrap()
    }

    #[test]
    fn weight_validation_reports_first_violated_row() {
        let bad = ConditionalMeasure::from_weights(
            vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.2, 0.2]],
            grid(3),
            grid(3),
            Representation::AtomicCdf,
        );
        match bad {
            Err(Error::InvalidMeasure { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let neg = ConditionalMeasure::from_weights(
            vec![vec![1.0], vec![1.5, -0.5], vec![0.4, 0.3, 0.3]],
            grid(3),
            grid(3),
            Representation::AtomicCdf,
        );
        match neg {
            Err(Error::InvalidMeasure { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        // Wrong admissible length is a triangularity violation.
        assert!(ConditionalMeasure::from_weights(
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            grid(2),
            grid(2),
            Representation::AtomicCdf,
        )
        .is_err());
        // More daughter rows than atoms leaves row 1 with no admissible atom.
        assert!(ConditionalMeasure::from_weights(
            vec![vec![]; 4],
            grid(2),
            grid(4),
            Representation::AtomicCdf,
        )
        .is_err());
    }

    #[test]
    fn density_rows_are_renormalized() {
        let gamma = vec![vec![3.0], vec![2.0, 6.0], vec![1.0, 1.0, 2.0]];
        let cm = ConditionalMeasure::from_density(&gamma, grid(3), grid(3)).unwrap();
        assert_eq!(cm.row(1), &[1.0]);
        assert_eq!(cm.row(2), &[0.25, 0.75]);
        assert_eq!(cm.row(3), &[0.25, 0.25, 0.5]);
        assert_eq!(cm.representation(), Representation::Density);

        let zero_row = vec![vec![0.0], vec![1.0, 1.0]];
        match ConditionalMeasure::from_density(&zero_row, grid(2), grid(2)) {
            Err(Error::InvalidMeasure { row: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let above = vec![vec![1.0, 0.5], vec![1.0, 1.0]];
        assert!(ConditionalMeasure::from_density(&above, grid(2), grid(2)).is_err());
        let nan = vec![vec![f64::NAN], vec![1.0, 1.0]];
        assert!(ConditionalMeasure::from_density(&nan, grid(2), grid(2)).is_err());
    }

    #[test]
    fn uniform_seed_puts_equal_weight_on_each_admissible_atom() {
        let cm = ConditionalMeasure::uniform(4, 4, 1.0).unwrap();
        assert_eq!(cm.row(1), &[1.0]);
        assert_eq!(cm.row(4), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn cdf_is_cumulative_clamped_and_degenerate_at_zero() {
        let cm = measure(vec![vec![1.0], vec![0.4, 0.6]], 2);
        assert_eq!(cm.cdf(0.5, 1.0).unwrap(), 0.4);
        assert_eq!(cm.cdf(0.99, 1.0).unwrap(), 0.4);
        assert_eq!(cm.cdf(1.0, 1.0).unwrap(), 1.0);
        // Row 1 has its atom at 0.5, above the parent 0.4: the clamp rules.
        assert_eq!(cm.cdf(0.3, 0.4).unwrap(), 0.0);
        assert_eq!(cm.cdf(0.45, 0.4).unwrap(), 1.0);
        assert_eq!(cm.cdf(0.2, 0.0).unwrap(), 1.0);
        assert!(cm.cdf(1.2, 0.5).is_err());
        assert!(cm.cdf(0.5, -0.1).is_err());
        assert!(cm.cdf(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn json_round_trip_preserves_weights_both_representations() {
        for repr in [Representation::AtomicCdf, Representation::Density] {
            let cm = ConditionalMeasure::from_weights(
                vec![vec![1.0], vec![0.3, 0.7], vec![0.2, 0.3, 0.5]],
                grid(3),
                grid(3),
                repr,
            )
            .unwrap();
            let text = cm.to_json_string().unwrap();
            let back = ConditionalMeasure::from_json_str(&text).unwrap();
            assert_eq!(back.representation(), repr);
            for l in 1..=3 {
                for (a, b) in back.row(l).iter().zip(cm.row(l)) {
                    assert!((a - b).abs() < 1e-13);
                }
            }
        }
        assert!(ConditionalMeasure::from_json_str("{}").is_err());
        let bad = r#"{"x_max":1.0,"m":2,"l":2,"representation":"atomic-cdf","weights":[[1.0],[0.7,0.7]]}"#;
        match ConditionalMeasure::from_json_str(bad) {
            Err(Error::InvalidMeasure { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prohorov_point_masses_and_split_mass() {
        let xm = 3.0;
        let d0 = FiniteMeasure::dirac(0.0, xm).unwrap();
        let d03 = FiniteMeasure::dirac(0.3, xm).unwrap();
        let d25 = FiniteMeasure::dirac(2.5, xm).unwrap();
        let tol = 1e-7;
        assert!((prohorov(&d0, &d03, tol).unwrap() - 0.3).abs() < 2e-7);
        // Distant point masses saturate at 1.
        assert!((prohorov(&d0, &d25, tol).unwrap() - 1.0).abs() < 2e-7);
        // Half the mass must travel distance 1: the distance is 0.5.
        let split = FiniteMeasure::new(&[(0.0, 0.5), (1.0, 0.5)], xm).unwrap();
        assert!((prohorov(&split, &d0, tol).unwrap() - 0.5).abs() < 2e-7);
        assert_eq!(prohorov(&d0, &d0, tol).unwrap(), 0.0);
        assert!(prohorov(&d0, &d03, 0.0).is_err());
        assert!(prohorov(&d0, &d03, f64::NAN).is_err());
    }

    #[test]
    fn prohorov_is_exactly_symmetric() {
        let a = FiniteMeasure::new(&[(0.1, 0.25), (0.4, 0.5), (0.9, 0.25)], 1.0).unwrap();
        let b = FiniteMeasure::new(&[(0.2, 0.6), (0.75, 0.4)], 1.0).unwrap();
        let t = 1e-6;
        assert_eq!(prohorov(&a, &b, t).unwrap(), prohorov(&b, &a, t).unwrap());
    }

    #[test]
    fn levy_matches_known_values_and_lower_bounds_prohorov() {
        let xm = 1.0;
        let d0 = FiniteMeasure::dirac(0.0, xm).unwrap();
        let d03 = FiniteMeasure::dirac(0.3, xm).unwrap();
        assert_eq!(levy(&d0, &d03), 0.3);
        assert_eq!(levy(&d0, &d0), 0.0);
        let split = FiniteMeasure::new(&[(0.0, 0.5), (1.0, 0.5)], xm).unwrap();
        // Feasible at 0.5 (vertical slack covers the split), infeasible below.
        assert!((levy(&split, &d0) - 0.5).abs() < 1e-12);
        let a = FiniteMeasure::new(&[(0.15, 0.3), (0.55, 0.7)], xm).unwrap();
        let b = FiniteMeasure::new(&[(0.1, 0.8), (0.8, 0.2)], xm).unwrap();
        let l = levy(&a, &b);
        let p = prohorov(&a, &b, 1e-7).unwrap();
        let tv = total_variation(&a, &b);
        assert!(l <= p + 2e-7, "levy {l} > prohorov {p}");
        assert!(p <= tv + 2e-7, "prohorov {p} > tv {tv}");
        assert_eq!(levy(&a, &b), levy(&b, &a));
    }

    #[test]
    fn total_variation_counts_weight_differences() {
        let a = FiniteMeasure::new(&[(0.2, 0.5), (0.6, 0.5)], 1.0).unwrap();
        let b = FiniteMeasure::new(&[(0.2, 0.2), (0.9, 0.8)], 1.0).unwrap();
        // |0.5-0.2| + |0.5-0| + |0-0.8| = 1.6, halved.
        assert!((total_variation(&a, &b) - 0.8).abs() < 1e-15);
        assert_eq!(total_variation(&a, &a), 0.0);
    }

    #[test]
    fn kolmogorov_single_row_matches_beta_vs_uniform_extremum() {
        // Beta(2,2) CDF against the uniform CDF on one full-domain row: the
        // largest gap is sqrt(3)/18 at x = 1/2 +- sqrt(3)/6.
        let m = 60;
        let beta_cdf = |u: f64| 3.0 * u * u - 2.0 * u * u * u;
        let d = grid(m);
        let p = Grid::new(1, 1.0).unwrap();
        let beta_row: Vec<f64> = (1..=m)
            .map(|k| beta_cdf(k as f64 / m as f64) - beta_cdf((k - 1) as f64 / m as f64))
            .collect();
        let unif_row = vec![1.0 / m as f64; m];
        let f = ConditionalMeasure::from_weights(vec![beta_row], d, p, Representation::AtomicCdf)
            .unwrap();
        let g = ConditionalMeasure::from_weights(vec![unif_row], d, p, Representation::AtomicCdf)
            .unwrap();
        let got = kolmogorov(&f, &g).unwrap();
        let exact = 3.0_f64.sqrt() / 18.0;
        assert!((got - exact).abs() <= 2.0 / m as f64, "{got} vs {exact}");
    }

    #[test]
    fn conditional_distance_sees_single_row_changes() {
        let f = measure(vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], 3);
        let mut w = f.weights().to_vec();
        w[2] = vec![0.4, 0.1, 0.5];
        let g = measure(w, 3);
        let expect = levy(&f.row_measure(3), &g.row_measure(3));
        assert_eq!(conditional_distance(&f, &g, MetricMode::Levy).unwrap(), expect);
        assert_eq!(kolmogorov(&f, &f).unwrap(), 0.0);
        // Kolmogorov over rows: row 3 cumsums differ by 0.2 at the first atom.
        assert!((kolmogorov(&f, &g).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn conditional_distance_merges_different_parent_grids() {
        let fine = ConditionalMeasure::uniform(4, 4, 1.0).unwrap();
        let coarse = ConditionalMeasure::uniform(2, 2, 1.0).unwrap();
        let d = conditional_distance(&fine, &coarse, MetricMode::Kolmogorov).unwrap();
        // Parent 0.25: fine row 1 is a point mass at 0.25, coarse row 1
        // spreads weight 1/2 on 0.5 (above the parent, clamped). At the
        // merged atom 0.25 the CDFs are 1 and 0.5.
        assert!((d - 0.5).abs() < 1e-15, "{d}");
        let other_domain = ConditionalMeasure::uniform(2, 2, 2.0).unwrap();
        assert!(kolmogorov(&fine, &other_domain).is_err());
    }

    #[test]
    fn sampled_error_is_dominated_by_kolmogorov_distance() {
        let f = measure(vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], 3);
        let g = measure(vec![vec![1.0], vec![0.9, 0.1], vec![0.1, 0.2, 0.7]], 3);
        let mut pts = Vec::new();
        for i in 0..=6 {
            for j in 0..=6 {
                pts.push((i as f64 / 6.0, j as f64 / 6.0));
            }
        }
        let sampled = sampled_uniform_error(&f, &g, &pts).unwrap();
        let full = kolmogorov(&f, &g).unwrap();
        assert!(sampled <= full + 1e-15, "{sampled} > {full}");
        assert!(sampled > 0.0);
    }

    #[test]
    fn set_distances_follow_their_definitions() {
        let f = measure(vec![vec![1.0], vec![0.5, 0.5]], 2);
        let g = measure(vec![vec![1.0], vec![0.1, 0.9]], 2);
        let a = vec![f.clone(), g.clone()];
        let b = vec![g.clone()];
        let mode = MetricMode::Kolmogorov;
        let rho_fg = conditional_distance(&f, &g, mode).unwrap();
        assert_eq!(set_distance(&a, &b, SetDistanceMode::MinPair, mode).unwrap(), 0.0);
        assert_eq!(set_distance(&a, &b, SetDistanceMode::Hausdorff, mode).unwrap(), rho_fg);
        assert!(set_distance(&[], &b, SetDistanceMode::MinPair, mode).is_err());
    }

    #[test]
    fn resample_round_trips_on_the_same_grid_and_refines() {
        let f = measure(vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], 3);
        let same = f.resample(grid(3), grid(3)).unwrap();
        for l in 1..=3 {
            for (a, b) in same.row(l).iter().zip(f.row(l)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let fine = f.resample(grid(6), grid(6)).unwrap();
        // Atoms of f land on even fine atoms; total mass per row is intact.
        for l in 1..=6 {
            let s: f64 = fine.row(l).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Fine row 6 (parent 1.0) reproduces f row 3 cumulatively.
        assert!((fine.cdf(1.0 / 3.0, 1.0).unwrap() - 0.2).abs() < 1e-14);
        assert!((fine.cdf(2.0 / 3.0, 1.0).unwrap() - 0.5).abs() < 1e-14);
    }
}
