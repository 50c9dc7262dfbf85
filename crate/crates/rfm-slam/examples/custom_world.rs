//! Define a world in TOML, simulate it, and solve it end to end.

use rfm_slam::eval::evaluate;
use rfm_slam::pipeline::{solve_dataset, PipelineConfig};
use rfm_slam::sim::{generate_map, simulate_run, NoiseSpec, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let toml = r#"
        extent = [25.0, 25.0]
        n_landmarks = 40
        waypoints = [[3.0, 3.0], [22.0, 3.0], [22.0, 22.0], [3.0, 22.0]]
        loop_visits = [0, 1]
        seed = 7
        max_range = 7.0
    "#;
    let spec = WorldSpec::from_toml_str(toml)?;
    let landmarks = generate_map(&spec)?;
    let ds = simulate_run(&landmarks, &spec, &NoiseSpec::scaled(1.5, 1.5))?;
    let (map, report) = solve_dataset(&ds, &PipelineConfig::default())?;
    let metrics = evaluate(&map, &ds)?;
    println!(
        "custom world: {} poses, {} loop closures, RMSE {:.3} m",
        report.n_poses, report.n_loop_closures, metrics.rmse_position
    );
    Ok(())
}
