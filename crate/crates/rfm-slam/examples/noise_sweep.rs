//! Sweep noise scales on the desk world and compare the separated pipeline
//! against the Gauss-Newton baseline; prints the aggregation CSV.

use rfm_slam::eval::{sweep, sweep_csv};
use rfm_slam::sim::WorldSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let template = WorldSpec::desk(0);
    let seeds: Vec<u64> = (0..5).collect();
    let cells = sweep(
        "desk",
        &template,
        &["rfm", "gn"],
        &[1.0, 2.0],
        &[1.0, 2.0],
        &seeds,
    )?;
    print!("{}", sweep_csv(&cells));
    Ok(())
}
