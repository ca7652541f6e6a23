use clap::{Parser, Subcommand, ValueEnum};
use floc_core::fmt::g17;
use floc_core::harness::{load_config, run_experiment, ExperimentConfig};
use floc_core::measures::{conditional_distance, ConditionalMeasure, MetricMode};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "floc",
    about = "Size-structured flocculation solver and post-fragmentation measure estimation",
    version
)]
struct Cli {
    /// JSON experiment configuration: a bare config or a recorded run
    /// manifest. Missing fields take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward model at one grid size and write the trajectory
    /// CSV.
    Forward {
        /// Number of size cells.
        #[arg(long)]
        n: usize,
    },
    /// Synthesize binned observations at one grid size and write the counts
    /// CSV plus its JSON metadata.
    GenerateData {
        /// Number of size cells (bins match the cells, sample times the
        /// study geometry).
        #[arg(long)]
        n: usize,
    },
    /// Recover the daughter measure from synthesized observations at one
    /// grid size.
    Invert {
        /// Number of size cells.
        #[arg(long)]
        n: usize,
    },
    /// Run the configured refinement study and write the artifact bundle
    /// with its manifest.
    Study,
    /// Print the distance between two conditional-measure JSON files.
    Metric {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Kolmogorov)]
        mode: Mode,
        /// Bisection tolerance, used by the prohorov mode.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Prohorov,
    Levy,
    Kolmogorov,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn effective_config(cli: &Cli) -> floc_core::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => load_config(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> floc_core::Result<ExitCode> {
    match cli.command {
        Command::Forward { n } => {
            let config = effective_config(&cli)?;
            let trajectory = floc_core::harness::forward_run(&config, n)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let path = config.out_dir.join(format!("trajectory_N{n}.csv"));
            trajectory.write_csv(&path)?;
            println!("{}", path.display());
        }
        Command::GenerateData { n } => {
            let config = effective_config(&cli)?;
            let observations = floc_core::harness::observations_run(&config, n)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let csv = config.out_dir.join(format!("observations_N{n}.csv"));
            let meta = config.out_dir.join(format!("observations_N{n}_meta.json"));
            observations.save(&csv, &meta)?;
            println!("{}", csv.display());
            println!("{}", meta.display());
        }
        Command::Invert { n } => {
            let config = effective_config(&cli)?;
            let estimate = floc_core::harness::invert_run(&config, n)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let measure = config.out_dir.join(format!("estimate_N{n}.json"));
            let history = config.out_dir.join(format!("estimate_N{n}_cost.csv"));
            estimate.save(&measure, &history)?;
            println!("{}", measure.display());
            println!("{}", history.display());
            println!("cost {}", g17(estimate.cost));
            println!("iterations {}", estimate.iterations);
            println!("converged {}", estimate.converged);
        }
        Command::Study => {
            let config = effective_config(&cli)?;
            let artifacts = run_experiment(&config)?;
            println!("{}", artifacts.manifest_path.display());
            for (n, error) in
                artifacts.curve.n_values.iter().zip(&artifacts.curve.errors)
            {
                println!("N={n} error {}", g17(*error));
            }
            if !artifacts.failures.is_empty() {
                for (n, reason) in &artifacts.failures {
                    eprintln!("leg N={n} failed: {reason}");
                }
                // Leg failures are numerical: the study completed, the
                // failed solves did not.
                return Ok(ExitCode::from(3));
            }
        }
        Command::Metric { a, b, mode, tol } => {
            let fa = ConditionalMeasure::load(&a)?;
            let fb = ConditionalMeasure::load(&b)?;
            let mode = match mode {
                Mode::Prohorov => MetricMode::Prohorov { tol },
                Mode::Levy => MetricMode::Levy,
                Mode::Kolmogorov => MetricMode::Kolmogorov,
            };
            println!("{}", g17(conditional_distance(&fa, &fb, mode)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}
