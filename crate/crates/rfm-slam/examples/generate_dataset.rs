//! Generate a dataset for a built-in world and write it in the text format.
//!
//! Usage: cargo run --example generate_dataset [map] [alpha] [beta] [seed] [out]

use rfm_slam::io::serialize_dataset;
use rfm_slam::sim::{generate_map, simulate_run, NoiseSpec, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let map = args.get(1).map(String::as_str).unwrap_or("desk");
    let alpha: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let beta: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let seed: u64 = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args.get(5).map(String::as_str).unwrap_or("dataset.txt");

    let spec = WorldSpec::by_name(map, seed).ok_or("unknown map name")?;
    let landmarks = generate_map(&spec)?;
    let ds = simulate_run(&landmarks, &spec, &NoiseSpec::scaled(alpha, beta))?;
    std::fs::write(out, serialize_dataset(&ds))?;
    println!(
        "wrote {} poses, {} landmarks, {} observations to {out}",
        ds.n_poses(),
        ds.landmarks_gt.len(),
        ds.observations.len()
    );
    Ok(())
}
