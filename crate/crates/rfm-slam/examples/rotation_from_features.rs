//! Estimate the relative rotation between two poses purely from common
//! feature-to-feature displacements: the constraint is linear in the
//! [cos, sin] parameters of the relative DCM.

use nalgebra::Vector2;
use rfm_slam::geometry::dcm_from_angle;
use rfm_slam::measurements::{pairwise_relative_displacements, RangeBearing};
use rfm_slam::rotation::{build_relative_rotation_system, solve_relative_rotation, EdgeKind};

fn observe(pose_id: usize, pose: (f64, f64, f64), landmarks: &[Vector2<f64>]) -> Vec<RangeBearing> {
    let rot = dcm_from_angle(pose.2).unwrap();
    landmarks
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let local = rot.transposed().rotate(&(l - Vector2::new(pose.0, pose.1)));
            RangeBearing {
                pose_id,
                landmark_id: i,
                range: local.norm(),
                bearing: local.y.atan2(local.x),
                sigma_r2: 0.0025,
                sigma_b2: 1e-4,
            }
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let landmarks = vec![
        Vector2::new(3.0, 1.0),
        Vector2::new(-1.0, 2.5),
        Vector2::new(2.0, -2.0),
        Vector2::new(-2.5, -1.5),
    ];
    let true_delta = 0.85;
    let obs_p = observe(0, (0.0, 0.0, 0.3), &landmarks);
    let obs_q = observe(1, (1.0, 0.5, 0.3 + true_delta), &landmarks);

    let dp = pairwise_relative_displacements(&obs_p)?;
    let dq = pairwise_relative_displacements(&obs_q)?;
    println!("{} landmark pairs per pose", dp.pairs.len());

    // A rough initial relative rotation is enough; it only shapes weights.
    let c_init = dcm_from_angle(0.7)?;
    let sys = build_relative_rotation_system(&dp, &dq, &c_init, None)?;
    let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure)?;
    println!(
        "estimated delta = {:.6} rad (truth {true_delta}), sigma = {:.2e} rad",
        edge.delta_theta,
        edge.var.sqrt()
    );
    Ok(())
}
