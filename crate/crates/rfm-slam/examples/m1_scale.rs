//! One large-scenario run: ~1100 poses, 286 landmarks, ~540 m with revisits.

use rfm_slam::eval::evaluate;
use rfm_slam::pipeline::{solve_dataset, PipelineConfig};
use rfm_slam::sim::{generate_map, simulate_run, trajectory_length, NoiseSpec, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let spec = WorldSpec::m1(seed);
    let landmarks = generate_map(&spec)?;
    let ds = simulate_run(&landmarks, &spec, &NoiseSpec::scaled(1.0, 1.0))?;
    let start = std::time::Instant::now();
    let (map, report) = solve_dataset(&ds, &PipelineConfig { odo_translation_rows: true, ..PipelineConfig::default() })?;
    let metrics = evaluate(&map, &ds)?;
    println!(
        "seed {seed}: {} poses over {:.1} m, {} loop closures, RMSE {:.3} m in {:.2} s",
        report.n_poses,
        trajectory_length(&ds.poses_gt),
        report.n_loop_closures,
        metrics.rmse_position,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
