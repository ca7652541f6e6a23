//! Experiment orchestration: the two built-in daughter-density families,
//! pseudo-data generation, run configuration, and end-to-end refinement
//! studies emitting plot-ready files plus a manifest sufficient to
//! reproduce every byte.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::domain::{project, Grid, KernelSet};
use crate::error::{Error, Result};
use crate::fmt::g17;
pub use crate::inverse::synthesize_observations as generate_data;
use crate::inverse::{refinement_study, ErrorCurve, MinimizeOptions, StudyModel, REFERENCE_ATOMS};
use crate::measures::{ConditionalMeasure, Representation};

/// The two built-in symmetric daughter-density families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthFamily {
    /// Density `6x(y-x)/y^3`: a Beta(2,2) profile in `x/y`.
    Beta22,
    /// Density `1/(pi sqrt(x(y-x)))`: a Beta(1/2,1/2) profile, singular at
    /// both endpoints.
    Arcsine,
}

/// Daughter density value at `(x, y)`. Zero above the parent size;
/// the arcsine family is genuinely infinite at `x = 0` and `x = y`.
pub fn truth_density(kind: TruthFamily, x: f64, y: f64) -> Result<f64> {
    if !y.is_finite() || y <= 0.0 {
        return Err(Error::invalid_input(format!("parent size y = {y}")));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::invalid_input(format!("daughter size x = {x}")));
    }
    if x > y {
        return Ok(0.0);
    }
    Ok(match kind {
        TruthFamily::Beta22 => 6.0 * x * (y - x) / (y * y * y),
        TruthFamily::Arcsine => 1.0 / (std::f64::consts::PI * (x * (y - x)).sqrt()),
    })
}

/// CDF of the family's daughter-fraction profile `u = x/y`, clamped so
/// that a full fraction is exactly one.
fn family_cdf(kind: TruthFamily, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    match kind {
        TruthFamily::Beta22 => u * u * (3.0 - 2.0 * u),
        TruthFamily::Arcsine => std::f64::consts::FRAC_2_PI * u.sqrt().asin(),
    }
}

/// Conditional measure of a built-in family on an `m x l` atom grid:
/// each admissible weight is the exact integral of the density over its
/// cell, so rows sum to one by telescoping and the first row is always a
/// point mass.
pub fn truth_measure(
    kind: TruthFamily,
    m: usize,
    l: usize,
    x_max: f64,
) -> Result<ConditionalMeasure> {
    let daughter = Grid::new(m, x_max)?;
    let parent = Grid::new(l, x_max)?;
    let mut rows = Vec::with_capacity(l);
    for row in 1..=l {
        let y = parent.node(row);
        let adm = row * m / l;
        let mut weights = Vec::with_capacity(adm);
        let mut below = 0.0;
        for j in 1..=adm {
            let c = if j == adm && m.is_multiple_of(l) {
                // The last admissible atom of an aligned grid sits exactly
                // at the parent size.
                1.0
            } else {
                family_cdf(kind, daughter.node(j) / y)
            };
            weights.push(c - below);
            below = c;
        }
        rows.push(weights);
    }
    ConditionalMeasure::from_weights(rows, daughter, parent, Representation::AtomicCdf)
}

/// Which measure drives the pseudo-data of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthSource {
    Beta22,
    Arcsine,
    File { path: PathBuf },
}

/// Hands out the truth measure on any requested `m x l` atom grid.
pub type TruthGenerator = Box<dyn Fn(usize, usize) -> Result<ConditionalMeasure> + Sync + Send>;

impl TruthSource {
    /// Generator handing out the truth on any requested atom grid. File
    /// measures are loaded once and resampled per grid.
    pub fn generator(&self, x_max: f64) -> Result<TruthGenerator> {
        match self {
            TruthSource::Beta22 => Ok(Box::new(move |m, l| {
                truth_measure(TruthFamily::Beta22, m, l, x_max)
            })),
            TruthSource::Arcsine => Ok(Box::new(move |m, l| {
                truth_measure(TruthFamily::Arcsine, m, l, x_max)
            })),
            TruthSource::File { path } => {
                let loaded = ConditionalMeasure::load(path)?;
                if loaded.daughter_grid().x_max() != x_max {
                    return Err(Error::IncompatibleDomains {
                        reason: format!(
                            "truth file domain {} vs configured x_max {x_max}",
                            loaded.daughter_grid().x_max()
                        ),
                    });
                }
                Ok(Box::new(move |m, l| {
                    loaded.resample(Grid::new(m, x_max)?, Grid::new(l, x_max)?)
                }))
            }
        }
    }
}

/// Full description of a reproduction run. The initial state is fixed at
/// `b0(x) = 1000 exp(-x)`; everything else is configurable. Missing JSON
/// fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub truth: TruthSource,
    pub c_a: f64,
    pub c_f: f64,
    pub c_mu: f64,
    pub x_max: f64,
    pub t_f: f64,
    pub n_steps: usize,
    pub n_values: Vec<usize>,
    pub sigma: f64,
    pub rng_seed: u64,
    pub out_dir: PathBuf,
    pub optimizer: MinimizeOptions,
    pub reference_atoms: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            truth: TruthSource::Beta22,
            c_a: 1e-6,
            c_f: 0.1,
            c_mu: 0.1,
            x_max: 1.0,
            t_f: 1.0,
            n_steps: 200,
            n_values: vec![5, 10, 15, 20],
            sigma: 0.0,
            rng_seed: 0,
            out_dir: PathBuf::from("out"),
            optimizer: MinimizeOptions::default(),
            reference_atoms: REFERENCE_ATOMS,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() {
            return Err(Error::invalid_input("n_values is empty"));
        }
        for w in self.n_values.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid_input("n_values must be increasing"));
            }
        }
        if self.n_values[0] < 2 {
            return Err(Error::invalid_input("n_values entries must be at least 2"));
        }
        for (name, v) in [("c_a", self.c_a), ("c_f", self.c_f), ("c_mu", self.c_mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid_input(format!("{name} = {v}")));
            }
        }
        if !self.x_max.is_finite() || self.x_max <= 0.0 {
            return Err(Error::invalid_input(format!("x_max = {}", self.x_max)));
        }
        if !self.t_f.is_finite() || self.t_f <= 0.0 {
            return Err(Error::invalid_input(format!("t_f = {}", self.t_f)));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid_input("n_steps = 0"));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::invalid_input(format!("sigma = {}", self.sigma)));
        }
        if self.reference_atoms < 2 {
            return Err(Error::invalid_input("reference_atoms must be at least 2"));
        }
        Ok(())
    }

    /// The fixed initial number density.
    pub fn b0(&self) -> impl Fn(f64) -> f64 + Sync + Send + Copy {
        |x: f64| 1e3 * (-x).exp()
    }

    pub fn kernels(&self) -> Result<KernelSet> {
        KernelSet::builtin(self.c_a, self.c_f, self.c_mu, self.x_max)
    }
}

/// Parses either a bare [`ExperimentConfig`] or a [`Manifest`] wrapper,
/// so a recorded run can be replayed from its own manifest.
pub fn load_config(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let config = if value.get("config").is_some() {
        let manifest: Manifest = serde_json::from_value(value)?;
        manifest.config
    } else {
        serde_json::from_value(value)?
    };
    config.validate()?;
    Ok(config)
}

/// Per-size record of one study leg as it was actually run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegRecord {
    pub n: usize,
    pub n_t: usize,
    /// Seed handed to the data generator for this leg.
    pub data_seed: u64,
    /// The seed measure, embedded verbatim.
    pub seed_measure: serde_json::Value,
    pub status: String,
    pub cost: Option<f64>,
    pub error: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

/// Everything needed to reproduce a run: the configuration plus what
/// happened, leg by leg, and which files were written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub initial_state: String,
    pub legs: Vec<LegRecord>,
    pub files: Vec<String>,
}

/// Paths and outcomes of a completed experiment.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub curve: ErrorCurve,
    pub failures: Vec<(usize, String)>,
}

/// Runs the configured refinement study and writes the artifact bundle:
/// per-size estimate JSON and cost-history CSV, the error-curve CSV, an
/// absolute-CDF-error surface CSV per size on the reference grid, and the
/// manifest. Returns the failures so callers can set a nonzero exit
/// status; partial failure still writes everything that succeeded.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let kernels = config.kernels()?;
    let truth = config.truth.generator(config.x_max)?;
    let b0 = config.b0();
    let model = StudyModel {
        kernels: &kernels,
        b0: &b0,
        t_f: config.t_f,
        n_steps: config.n_steps,
        options: config.optimizer,
        reference_atoms: config.reference_atoms,
    };
    let outcome = refinement_study(
        truth.as_ref(),
        &config.n_values,
        config.sigma,
        config.rng_seed,
        &model,
    )?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut files = Vec::new();

    let curve_name = "error_curve.csv".to_string();
    outcome.curve.save(&config.out_dir.join(&curve_name))?;
    files.push(curve_name);

    let ref_grid = Grid::new(config.reference_atoms, config.x_max)?;
    for (n, est) in &outcome.estimates {
        let measure_name = format!("estimate_N{n}.json");
        let history_name = format!("estimate_N{n}_cost.csv");
        est.save(
            &config.out_dir.join(&measure_name),
            &config.out_dir.join(&history_name),
        )?;
        files.push(measure_name);
        files.push(history_name);

        let est_ref = est.measure.resample(ref_grid, ref_grid)?;
        let surface_name = format!("abs_error_N{n}.csv");
        let surface = cdf_error_surface(&est_ref, &outcome.reference_truth, ref_grid)?;
        std::fs::write(config.out_dir.join(&surface_name), surface)?;
        files.push(surface_name);
    }

    let legs = config
        .n_values
        .iter()
        .map(|&n| {
            let seed_measure = ConditionalMeasure::uniform(n, n, config.x_max)?;
            let est = outcome.estimates.iter().find(|(m, _)| *m == n).map(|(_, e)| e);
            let failure = outcome.failures.iter().find(|(m, _)| *m == n);
            let idx = outcome.curve.n_values.iter().position(|&m| m == n);
            Ok(LegRecord {
                n,
                n_t: n + 40,
                data_seed: config.rng_seed.wrapping_add(n as u64),
                seed_measure: serde_json::from_str(&seed_measure.to_json_string()?)?,
                status: match failure {
                    Some((_, msg)) => msg.clone(),
                    None => "ok".to_string(),
                },
                cost: est.map(|e| e.cost),
                error: idx.map(|i| outcome.curve.errors[i]),
                iterations: est.map(|e| e.iterations),
                converged: est.map(|e| e.converged),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        config: config.clone(),
        initial_state: "b0(x) = 1000 * exp(-x), projected per grid".to_string(),
        legs,
        files,
    };
    let manifest_path = config.out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(RunArtifacts {
        out_dir: config.out_dir.clone(),
        manifest_path,
        curve: outcome.curve,
        failures: outcome.failures,
    })
}

/// Pointwise `|F(x,y) - G(x,y)|` of the conditional CDFs on the atom
/// grid, one CSV row per parent node.
fn cdf_error_surface(f: &ConditionalMeasure, g: &ConditionalMeasure, grid: Grid) -> Result<String> {
    let n = grid.n_cells();
    let mut out = String::from("y");
    for j in 1..=n {
        out.push_str(&format!(",x_{j}"));
    }
    out.push('\n');
    for l in 1..=n {
        let y = grid.node(l);
        out.push_str(&g17(y));
        for m in 1..=n {
            let x = grid.node(m);
            let d = (f.cdf(x, y)? - g.cdf(x, y)?).abs();
            out.push(',');
            out.push_str(&g17(d));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Forward-solves the configured model at grid size `n` with the
/// configured truth and returns the trajectory.
pub fn forward_run(config: &ExperimentConfig, n: usize) -> Result<crate::forward::Trajectory> {
    config.validate()?;
    let grid = Grid::new(n, config.x_max)?;
    let truth = config.truth.generator(config.x_max)?(n, n)?;
    let b0 = project(config.b0(), grid)?;
    crate::forward::integrate(&b0, &truth, &config.kernels()?, config.t_f, config.n_steps)
}

/// Generates one observation set at grid size `n` from the configured
/// truth, with the study's bin and time geometry.
pub fn observations_run(
    config: &ExperimentConfig,
    n: usize,
) -> Result<crate::inverse::ObservationSet> {
    config.validate()?;
    let grid = Grid::new(n, config.x_max)?;
    let truth = config.truth.generator(config.x_max)?(n, n)?;
    let b0 = project(config.b0(), grid)?;
    let edges: Vec<f64> = (0..=n).map(|j| grid.node(j)).collect();
    let n_t = n + 40;
    let times: Vec<f64> = (1..=n_t).map(|i| config.t_f * i as f64 / n_t as f64).collect();
    generate_data(
        &truth,
        &config.kernels()?,
        &b0,
        config.t_f,
        config.n_steps,
        &edges,
        &times,
        config.sigma,
        config.rng_seed.wrapping_add(n as u64),
    )
}

/// Runs a single inversion leg at grid size `n` and returns the estimate
/// with its setup-derived data.
pub fn invert_run(config: &ExperimentConfig, n: usize) -> Result<crate::inverse::Estimate> {
    let observations = observations_run(config, n)?;
    let grid = Grid::new(n, config.x_max)?;
    let b0 = project(config.b0(), grid)?;
    let setup = crate::inverse::InverseSetup::new(
        grid,
        config.kernels()?,
        b0,
        config.t_f,
        config.n_steps,
        observations,
    )?;
    let seed = ConditionalMeasure::uniform(n, n, config.x_max)?;
    crate::inverse::minimize(&setup, &seed, &config.optimizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::partial_moments;

    #[test]
    fn density_values_match_the_displayed_formulas() {
        assert_eq!(truth_density(TruthFamily::Beta22, 0.5, 1.0).unwrap(), 1.5);
        assert_eq!(truth_density(TruthFamily::Beta22, 0.7, 0.5).unwrap(), 0.0);
        let arc = truth_density(TruthFamily::Arcsine, 0.5, 1.0).unwrap();
        assert!((arc - std::f64::consts::FRAC_2_PI).abs() < 1e-15);
        assert!(truth_density(TruthFamily::Arcsine, 0.0, 1.0).unwrap().is_infinite());
        assert!(truth_density(TruthFamily::Beta22, 0.5, 0.0).is_err());
        assert!(truth_density(TruthFamily::Beta22, -0.1, 1.0).is_err());
    }

    #[test]
    fn truth_measures_integrate_the_densities_exactly() {
        for kind in [TruthFamily::Beta22, TruthFamily::Arcsine] {
            let cm = truth_measure(kind, 12, 12, 1.0).unwrap();
            assert_eq!(cm.row(1), &[1.0]);
            for l in 1..=12 {
                let s: f64 = cm.row(l).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                // Symmetric daughters: weights read the same reversed.
                let row = cm.row(l);
                for (a, b) in row.iter().zip(row.iter().rev()) {
                    assert!((a - b).abs() <= 1e-12, "row {l} asymmetric");
                }
            }
        }
        // Beta(2,2) row masses against the closed-form cell integrals.
        let cm = truth_measure(TruthFamily::Beta22, 4, 4, 1.0).unwrap();
        let cdf = |u: f64| u * u * (3.0 - 2.0 * u);
        let row = cm.row(4);
        for (j, &w) in row.iter().enumerate() {
            let expect = cdf((j + 1) as f64 / 4.0) - cdf(j as f64 / 4.0);
            assert!((w - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn rectangular_truth_grids_stay_row_stochastic() {
        let cm = truth_measure(TruthFamily::Beta22, 9, 3, 1.0).unwrap();
        assert_eq!(cm.row(1).len(), 3);
        assert_eq!(cm.row(3).len(), 9);
        for l in 1..=3 {
            let s: f64 = cm.row(l).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn config_json_round_trips_and_defaults_apply() {
        let default = ExperimentConfig::default();
        let parsed = load_config("{}").unwrap();
        assert_eq!(parsed, default);
        let text = serde_json::to_string(&default).unwrap();
        assert_eq!(load_config(&text).unwrap(), default);
        let arcsine = load_config(r#"{"truth":"arcsine","sigma":0.5}"#).unwrap();
        assert_eq!(arcsine.truth, TruthSource::Arcsine);
        assert_eq!(arcsine.sigma, 0.5);
        assert!(load_config(r#"{"n_values":[]}"#).is_err());
        assert!(load_config(r#"{"n_values":[5,5]}"#).is_err());
        assert!(load_config(r#"{"t_f":0.0}"#).is_err());
    }

    #[test]
    fn noise_statistics_match_the_declared_distribution() {
        // One tiny forward problem, many seeds: sample mean and variance of
        // a single noisy entry must match the clean value and sigma^2.
        let n = 2;
        let grid = Grid::new(n, 1.0).unwrap();
        let b0 = project(|x| 1e3 * (-x).exp(), grid).unwrap();
        let k = KernelSet::builtin(1e-6, 0.1, 0.1, 1.0).unwrap();
        let truth = truth_measure(TruthFamily::Beta22, n, n, 1.0).unwrap();
        let edges = [0.0, 1.0];
        let times = [1.0];
        let traj = crate::forward::integrate(&b0, &truth, &k, 1.0, 4).unwrap();
        let clean = partial_moments(&traj, &edges, &times).unwrap()[0][0];
        let sigma = 2.0;
        let replicates = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seed in 0..replicates {
            let obs = generate_data(
                &truth, &k, &b0, 1.0, 4, &edges, &times, sigma, seed as u64,
            )
            .unwrap();
            let v = obs.counts[0][0];
            sum += v;
            sum_sq += v * v;
        }
        let r = replicates as f64;
        let mean = sum / r;
        let var = sum_sq / r - mean * mean;
        assert!(
            (mean - clean).abs() <= 4.0 * sigma / r.sqrt(),
            "mean {mean} vs clean {clean}"
        );
        let rel = (var / (sigma * sigma) - 1.0).abs();
        assert!(rel <= 3.0 * (2.0 / r).sqrt(), "variance off by {rel}");
    }

    #[test]
    fn experiment_bundle_is_complete_and_reproducible() {
        let dir1 = std::env::temp_dir().join("floc-exp-a");
        let dir2 = std::env::temp_dir().join("floc-exp-b");
        for d in [&dir1, &dir2] {
            if d.exists() {
                std::fs::remove_dir_all(d).unwrap();
            }
        }
        let config = ExperimentConfig {
            n_values: vec![2, 3],
            n_steps: 30,
            reference_atoms: 12,
            optimizer: MinimizeOptions { max_iters: 2, ..MinimizeOptions::default() },
            out_dir: dir1.clone(),
            sigma: 0.25,
            rng_seed: 42,
            ..ExperimentConfig::default()
        };
        let run1 = run_experiment(&config).unwrap();
        assert!(run1.failures.is_empty());
        assert_eq!(run1.curve.n_values, vec![2, 3]);

        // Replay from the manifest alone, into a fresh directory.
        let manifest_text = std::fs::read_to_string(&run1.manifest_path).unwrap();
        let mut replay = load_config(&manifest_text).unwrap();
        replay.out_dir = dir2.clone();
        let run2 = run_experiment(&replay).unwrap();
        assert!(run2.failures.is_empty());

        let manifest: Manifest = serde_json::from_str(&manifest_text).unwrap();
        assert_eq!(manifest.legs.len(), 2);
        assert!(manifest.legs.iter().all(|l| l.status == "ok"));
        for name in &manifest.files {
            let a = std::fs::read(dir1.join(name)).unwrap();
            let b = std::fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            if name.ends_with(".json") {
                ConditionalMeasure::load(&dir1.join(name)).unwrap();
            } else if name == "error_curve.csv" {
                ErrorCurve::from_csv_str(&String::from_utf8(a).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn file_truths_are_loaded_and_resampled() {
        let dir = std::env::temp_dir().join("floc-file-truth");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truth.json");
        truth_measure(TruthFamily::Beta22, 8, 8, 1.0).unwrap().save(&path).unwrap();
        let source = TruthSource::File { path: path.clone() };
        let gen = source.generator(1.0).unwrap();
        let cm = gen(4, 4).unwrap();
        assert_eq!(cm.daughter_grid().n_cells(), 4);
        for l in 1..=4 {
            let s: f64 = cm.row(l).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(source.generator(2.0).is_err());
    }
}
