//! Full pipeline on a simulated world: rotation edges, orientation MLE,
//! linear position solve, and evaluation against ground truth.

use rfm_slam::eval::evaluate;
use rfm_slam::pipeline::{solve_dataset, PipelineConfig};
use rfm_slam::sim::{baseline_odometry_trajectory, generate_map, simulate_run, NoiseSpec, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = WorldSpec::desk(42);
    let landmarks = generate_map(&spec)?;
    let ds = simulate_run(&landmarks, &spec, &NoiseSpec::scaled(2.0, 2.0))?;
    println!(
        "simulated {} poses over {:.1} m with noise scales (2, 2)",
        ds.n_poses(),
        rfm_slam::sim::trajectory_length(&ds.poses_gt)
    );

    let (map, report) = solve_dataset(&ds, &PipelineConfig::default())?;
    println!(
        "rotation edges: {} ({} loop closures), MLE converged in {} iterations",
        report.n_rotation_edges, report.n_loop_closures, report.mle_iterations
    );

    let metrics = evaluate(&map, &ds)?;
    println!(
        "pipeline RMSE: {:.3} m position, {:.4} rad heading",
        metrics.rmse_position, metrics.rmse_heading
    );

    // Contrast with dead reckoning.
    let odo = baseline_odometry_trajectory(&ds);
    let odo_rmse = rfm_slam::eval::rmse_position(&odo, &ds.poses_gt, rfm_slam::eval::Alignment::Anchor)?;
    println!("dead-reckoning RMSE: {odo_rmse:.3} m");
    Ok(())
}
