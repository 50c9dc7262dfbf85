use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfm_slam::error::{Error, Result};
use rfm_slam::eval;
use rfm_slam::io;
use rfm_slam::pipeline::{solve_dataset, PipelineConfig};
use rfm_slam::sim::{generate_map, simulate_run, NoiseSpec, WorldSpec};

#[derive(Parser)]
#[command(name = "rfm-slam", about = "Separated-estimation SLAM: simulate, solve, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset for a built-in map name or a custom TOML world spec.
    Simulate {
        /// Map: m1, m2, desk, desk-long, or a path to a .toml world spec.
        #[arg(long)]
        map: String,
        /// Odometry noise scale.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Range-bearing noise scale.
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a dataset with the separated pipeline and write the estimate.
    Solve {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add pose-to-pose translation rows to the position solve.
        #[arg(long)]
        odo_translation_rows: bool,
        /// Optional CSV with solver diagnostics.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare an estimate against the ground truth in a dataset.
    Eval {
        estimate: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one or more solvers on a dataset, or sweep noise levels.
    Compare {
        data: PathBuf,
        /// Comma-separated solvers: rfm, gn.
        #[arg(long, default_value = "rfm,gn")]
        solvers: String,
        #[arg(long)]
        out: PathBuf,
        /// Sweep mode: comma-separated odometry noise scales.
        #[arg(long)]
        alphas: Option<String>,
        /// Sweep mode: comma-separated range-bearing noise scales.
        #[arg(long)]
        betas: Option<String>,
        /// Sweep mode: number of seeds per noise level.
        #[arg(long, default_value_t = 10)]
        runs: u64,
        /// Sweep mode: map for regenerated datasets (defaults to desk).
        #[arg(long, default_value = "desk")]
        map: String,
    },
}

fn load_world(map: &str, seed: u64) -> Result<WorldSpec> {
    if let Some(mut spec) = WorldSpec::by_name(map, seed) {
        spec.seed = seed;
        return Ok(spec);
    }
    if map.ends_with(".toml") {
        let text = std::fs::read_to_string(map)?;
        let mut spec = WorldSpec::from_toml_str(&text)?;
        spec.seed = seed;
        return Ok(spec);
    }
    Err(Error::InvalidArgument(format!(
        "unknown map '{map}'; expected m1, m2, desk, desk-long or a .toml path"
    )))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} value '{t}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { map, alpha, beta, seed, out } => {
            let spec = load_world(&map, seed)?;
            let lms = generate_map(&spec)?;
            let ds = simulate_run(&lms, &spec, &NoiseSpec::scaled(alpha, beta))?;
            std::fs::write(&out, io::serialize_dataset(&ds))?;
            eprintln!(
                "simulated {} poses, {} landmarks, {} observations -> {}",
                ds.n_poses(),
                ds.landmarks_gt.len(),
                ds.observations.len(),
                out.display()
            );
        }
        Command::Solve { data, out, odo_translation_rows, report } => {
            let ds = io::parse_dataset(&std::fs::read_to_string(&data)?)?;
            let cfg = PipelineConfig { odo_translation_rows, ..PipelineConfig::default() };
            let (map, solve_report) = solve_dataset(&ds, &cfg)?;
            std::fs::write(&out, io::serialize_estimate(&map))?;
            if let Some(path) = report {
                std::fs::write(&path, solve_report.csv())?;
            }
            eprintln!(
                "solved {} poses with {} rotation edges ({} loop closures) -> {}",
                solve_report.n_poses,
                solve_report.n_rotation_edges,
                solve_report.n_loop_closures,
                out.display()
            );
        }
        Command::Eval { estimate, data, out } => {
            let est = io::parse_estimate(&std::fs::read_to_string(&estimate)?)?;
            let ds = io::parse_dataset(&std::fs::read_to_string(&data)?)?;
            let report = eval::evaluate(&est, &ds)?;
            std::fs::write(&out, report.csv())?;
            eprintln!(
                "rmse {:.4} m / {:.5} rad over {:.1} m{}",
                report.rmse_position,
                report.rmse_heading,
                report.trajectory_length,
                if report.catastrophic { " (catastrophic)" } else { "" }
            );
        }
        Command::Compare { data, solvers, out, alphas, betas, runs, map } => {
            let solver_list: Vec<&str> = solvers.split(',').map(|s| s.trim()).collect();
            let sweep_mode = alphas.is_some() || betas.is_some();
            if sweep_mode {
                let alphas = parse_list(alphas.as_deref().unwrap_or("1"), "alpha")?;
                let betas = parse_list(betas.as_deref().unwrap_or("1"), "beta")?;
                let seeds: Vec<u64> = (0..runs).collect();
                let template = load_world(&map, 0)?;
                let cells =
                    eval::sweep(&map, &template, &solver_list, &alphas, &betas, &seeds)?;
                std::fs::write(&out, eval::sweep_csv(&cells))?;
                eprintln!("{} sweep cells -> {}", cells.len(), out.display());
            } else {
                let ds = io::parse_dataset(&std::fs::read_to_string(&data)?)?;
                let mut cells = Vec::new();
                for solver in solver_list {
                    let outcome = match solver {
                        "rfm" => eval::run_rfm(&ds),
                        "gn" => eval::run_gn(&ds),
                        other => {
                            return Err(Error::InvalidArgument(format!(
                                "unknown solver '{other}'"
                            )))
                        }
                    };
                    cells.push(eval::SweepCell {
                        map: data.display().to_string(),
                        solver: solver.to_string(),
                        alpha: ds.noise.alpha,
                        beta: ds.noise.beta,
                        outcomes: vec![outcome],
                    });
                }
                std::fs::write(&out, eval::sweep_csv(&cells))?;
                eprintln!("compared {} solver(s) -> {}", cells.len(), out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
