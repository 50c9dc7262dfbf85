//! On-manifold orientation estimation over a pose graph with a loop
//! closure: chained initial guess, trust-region MLE, and the closed-form
//! heading covariance.

use nalgebra::DVector;
use rfm_slam::geometry::wrap_angle;
use rfm_slam::orientation::{
    chain_initial_guess, optimize_orientations, orientation_information, OptimizeOptions,
    OrientationGraph,
};
use rfm_slam::rotation::{EdgeKind, RotationEdge};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A 12-node chain with noisy increments plus one accurate loop closure.
    let truth: Vec<f64> = (0..12).map(|k| 0.4 * k as f64).map(wrap_angle).collect();
    let mut edges: Vec<RotationEdge> = truth
        .windows(2)
        .enumerate()
        .map(|(k, w)| RotationEdge {
            from_pose: k,
            to_pose: k + 1,
            delta_theta: wrap_angle(w[1] - w[0]) + if k % 2 == 0 { 0.03 } else { -0.03 },
            var: 0.01,
            kind: EdgeKind::OdometryFused,
        })
        .collect();
    edges.push(RotationEdge {
        from_pose: 0,
        to_pose: 11,
        delta_theta: wrap_angle(truth[11] - truth[0]),
        var: 1e-6,
        kind: EdgeKind::LoopClosure,
    });

    let graph = OrientationGraph::new(12, edges)?;
    let theta0 = chain_initial_guess(&graph, truth[0])?;
    let report = optimize_orientations(&graph, &theta0, &OptimizeOptions::default());
    println!(
        "converged: {} after {} iterations, cost {:.4}",
        report.converged, report.iterations, report.cost
    );

    let (_, sigma) = orientation_information(&graph, 0)?;
    let err: DVector<f64> =
        DVector::from_fn(12, |i, _| wrap_angle(report.theta[i] - truth[i]));
    println!("node  estimate   truth    error     predicted sigma");
    for i in 0..12 {
        let s = if i == 0 { 0.0 } else { sigma[(i - 1, i - 1)].sqrt() };
        println!(
            "{i:>4}  {:>8.4}  {:>7.4}  {:>8.4}  {:.4}",
            report.theta[i], truth[i], err[i], s
        );
    }
    Ok(())
}
