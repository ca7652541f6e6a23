//! Size domain: uniform grids on `[0, x_max]`, piecewise-constant size
//! distributions, density projection, and rate-kernel containers.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Default number of midpoint subsamples per cell used by [`project`].
pub const DEFAULT_SUBSAMPLES: usize = 16;

/// A uniform partition of `[0, x_max]` into `n_cells` cells.
///
/// Node `j` sits at `x_max * j / n_cells`, so node 0 is exactly 0 and node
/// `n_cells` is exactly `x_max`. Cell `j` (1-based) spans nodes `j-1..j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    n_cells: usize,
    x_max: f64,
}

impl Grid {
    pub fn new(n_cells: usize, x_max: f64) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::InvalidGrid { reason: "zero cells".into() });
        }
        if !x_max.is_finite() || x_max <= 0.0 {
            return Err(Error::InvalidGrid { reason: format!("x_max = {x_max}") });
        }
        Ok(Grid { n_cells, x_max })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.n_cells as f64
    }

    /// Node coordinate, `j` in `0..=n_cells`. Both endpoints are exact;
    /// dividing after multiplying would round `node(n_cells)` off `x_max`
    /// for some domain lengths.
    pub fn node(&self, j: usize) -> f64 {
        debug_assert!(j <= self.n_cells);
        if j == self.n_cells {
            self.x_max
        } else {
            self.x_max * j as f64 / self.n_cells as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_cells).map(|j| self.node(j)).collect()
    }

    /// 1-based index of the cell whose half-open interval `(node(j-1), node(j)]`
    /// contains `x`; `x = 0` is assigned to cell 1.
    pub fn cell_of(&self, x: f64) -> Result<usize> {
        if !x.is_finite() || x < 0.0 || x > self.x_max {
            return Err(Error::invalid_input(format!("x = {x} outside [0, {}]", self.x_max)));
        }
        if x == 0.0 {
            return Ok(1);
        }
        let mut j = (x / self.x_max * self.n_cells as f64).ceil() as usize;
        j = j.clamp(1, self.n_cells);
        // Guard against rounding on either side of a node.
        while j > 1 && x <= self.node(j - 1) {
            j -= 1;
        }
        while j < self.n_cells && x > self.node(j) {
            j += 1;
        }
        Ok(j)
    }
}

/// Piecewise-constant function on a [`Grid`]: value `values[j-1]` on cell `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeDistribution {
    grid: Grid,
    values: Vec<f64>,
}

impl SizeDistribution {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch {
                reason: format!("{} values on a {}-cell grid", values.len(), grid.n_cells()),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("size distribution value {v}") });
        }
        Ok(SizeDistribution { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Point evaluation; cells are closed on the left so `eval(0)` is the
    /// first value and `eval(x_max)` the last.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || x < 0.0 || x > self.grid.x_max() {
            return Err(Error::invalid_input(format!("x = {x} outside the grid domain")));
        }
        let n = self.grid.n_cells();
        let mut j = (x / self.grid.x_max() * n as f64).floor() as usize + 1;
        j = j.clamp(1, n);
        while j > 1 && x < self.grid.node(j - 1) {
            j -= 1;
        }
        while j < n && x >= self.grid.node(j) {
            j += 1;
        }
        Ok(self.values[j - 1])
    }

    /// `integral |b| dx` over the whole domain.
    pub fn l1_norm(&self) -> f64 {
        self.grid.dx() * self.values.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Discrete moment `dx * sum_j node(j)^order * values[j]`, with kernels
    /// and weights anchored at cell right endpoints. Order 0 is the total
    /// count, order 1 the total mass.
    pub fn moment(&self, order: u32) -> f64 {
        let dx = self.grid.dx();
        dx * self
            .values
            .iter()
            .enumerate()
            .map(|(idx, v)| self.grid.node(idx + 1).powi(order as i32) * v)
            .sum::<f64>()
    }
}

/// Projects a density onto a grid with [`DEFAULT_SUBSAMPLES`] midpoint
/// samples per cell.
pub fn project<F: Fn(f64) -> f64>(f: F, grid: Grid) -> Result<SizeDistribution> {
    project_with(f, grid, DEFAULT_SUBSAMPLES)
}

/// Cell averages by composite midpoint quadrature: value `j` is the mean of
/// `subsamples` equally spaced midpoint evaluations inside cell `j`. The map
/// is linear, reproduces piecewise-constant inputs exactly, and does not
/// increase the L1 norm.
pub fn project_with<F: Fn(f64) -> f64>(
    f: F,
    grid: Grid,
    subsamples: usize,
) -> Result<SizeDistribution> {
    if subsamples == 0 {
        return Err(Error::invalid_input("zero quadrature subsamples"));
    }
    let dx = grid.dx();
    let h = dx / subsamples as f64;
    let mut values = Vec::with_capacity(grid.n_cells());
    for j in 1..=grid.n_cells() {
        let left = grid.node(j - 1);
        let mut acc = 0.0;
        for s in 0..subsamples {
            let x = left + (s as f64 + 0.5) * h;
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("density sample at x = {x}") });
            }
            acc += v;
        }
        values.push(acc / subsamples as f64);
    }
    SizeDistribution::new(grid, values)
}

type Kernel2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Kernel1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Aggregation kernel `k_a(x, y)`, fragmentation rate `k_f(x)`, and removal
/// rate `mu(x)`, with cached upper bounds of each over the domain.
///
/// `k_a` must be symmetric, nonnegative, and zero whenever `x + y > x_max`
/// (pairs with `x + y = x_max` are still active); `k_f` and `mu` must be
/// nonnegative. Constructors verify these on a sample lattice.
#[derive(Clone)]
pub struct KernelSet {
    ka: Kernel2,
    kf: Kernel1,
    mu: Kernel1,
    x_max: f64,
    sup_ka: f64,
    sup_kf: f64,
    sup_mu: f64,
}

impl std::fmt::Debug for KernelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSet")
            .field("x_max", &self.x_max)
            .field("sup_ka", &self.sup_ka)
            .field("sup_kf", &self.sup_kf)
            .field("sup_mu", &self.sup_mu)
            .finish_non_exhaustive()
    }
}

impl KernelSet {
    /// The built-in volume-based kernels
    /// `k_a = c_a (x^(1/3) + y^(1/3))^3` (truncated past `x + y = x_max`),
    /// `k_f = c_f x^(1/3)`, `mu = c_mu x^(1/3)`, with exact cached bounds.
    pub fn builtin(c_a: f64, c_f: f64, c_mu: f64, x_max: f64) -> Result<Self> {
        for (name, c) in [("c_a", c_a), ("c_f", c_f), ("c_mu", c_mu)] {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidKernel { reason: format!("{name} = {c}") });
            }
        }
        if !x_max.is_finite() || x_max <= 0.0 {
            return Err(Error::InvalidKernel { reason: format!("x_max = {x_max}") });
        }
        let xm = x_max;
        let ka = move |x: f64, y: f64| {
            if x + y > xm {
                0.0
            } else {
                c_a * (x.cbrt() + y.cbrt()).powi(3)
            }
        };
        Ok(KernelSet {
            ka: Arc::new(ka),
            kf: Arc::new(move |x: f64| c_f * x.cbrt()),
            mu: Arc::new(move |x: f64| c_mu * x.cbrt()),
            x_max,
            // (x^(1/3) + y^(1/3))^3 is maximal on x + y <= x_max at the
            // symmetric point, where it equals 4 x_max.
            sup_ka: 4.0 * c_a * x_max,
            sup_kf: c_f * x_max.cbrt(),
            sup_mu: c_mu * x_max.cbrt(),
        })
    }

    /// Wraps caller-supplied kernels. Symmetry, sign, finiteness, and the
    /// aggregation truncation are checked on a deterministic sample lattice,
    /// and the cached bounds are the sampled maxima.
    pub fn from_fns<A, F, M>(ka: A, kf: F, mu: M, x_max: f64) -> Result<Self>
    where
        A: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        M: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !x_max.is_finite() || x_max <= 0.0 {
            return Err(Error::InvalidKernel { reason: format!("x_max = {x_max}") });
        }
        const SAMPLES: usize = 64;
        let pts: Vec<f64> =
            (0..=SAMPLES).map(|i| x_max * i as f64 / SAMPLES as f64).collect();
        let mut sup_ka = 0.0_f64;
        for (i, &x) in pts.iter().enumerate() {
            for &y in &pts[i..] {
                let v = ka(x, y);
                let w = ka(y, x);
                if !v.is_finite() || !w.is_finite() {
                    return Err(Error::InvalidKernel {
                        reason: format!("k_a non-finite at ({x}, {y})"),
                    });
                }
                if v < 0.0 {
                    return Err(Error::InvalidKernel {
                        reason: format!("k_a negative at ({x}, {y})"),
                    });
                }
                if (v - w).abs() > 1e-9 * (1.0 + v.abs()) {
                    return Err(Error::InvalidKernel {
                        reason: format!("k_a asymmetric at ({x}, {y}): {v} vs {w}"),
                    });
                }
                if x + y > x_max * (1.0 + 1e-12) && v != 0.0 {
                    return Err(Error::InvalidKernel {
                        reason: format!("k_a not truncated at ({x}, {y})"),
                    });
                }
                sup_ka = sup_ka.max(v);
            }
        }
        let mut sup_kf = 0.0_f64;
        let mut sup_mu = 0.0_f64;
        for &x in &pts {
            for (name, k, sup) in
                [("k_f", &kf as &dyn Fn(f64) -> f64, &mut sup_kf), ("mu", &mu, &mut sup_mu)]
            {
                let v = k(x);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidKernel {
                        reason: format!("{name} invalid at {x}: {v}"),
                    });
                }
                *sup = sup.max(v);
            }
        }
        Ok(KernelSet {
            ka: Arc::new(ka),
            kf: Arc::new(kf),
            mu: Arc::new(mu),
            x_max,
            sup_ka,
            sup_kf,
            sup_mu,
        })
    }

    pub fn k_a(&self, x: f64, y: f64) -> f64 {
        (self.ka)(x, y)
    }

    pub fn k_f(&self, x: f64) -> f64 {
        (self.kf)(x)
    }

    pub fn mu(&self, x: f64) -> f64 {
        (self.mu)(x)
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn sup_k_a(&self) -> f64 {
        self.sup_ka
    }

    pub fn sup_k_f(&self) -> f64 {
        self.sup_kf
    }

    pub fn sup_mu(&self) -> f64 {
        self.sup_mu
    }
}
