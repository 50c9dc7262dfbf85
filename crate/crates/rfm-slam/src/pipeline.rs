//! End-to-end solver: dataset in, solved map out. Orientation first, then
//! one linear position solve.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::measurements::{
    invert_range_bearing, pairwise_relative_displacements, LocalFeaturePosition,
};
use crate::orientation::{
    chain_initial_guess, optimize_orientations, orientation_information, HeadingEstimate,
    OptimizeOptions, OrientationGraph,
};
use crate::position::{assemble_global_system_at, OdometryTranslation};
use crate::rotation::{compute_rotation_edges, EdgeConfig, EdgeKind, OdometryAngle};
use crate::sim::Dataset;

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub edges: EdgeConfig,
    /// Add pose-to-pose translation rows to the position solve. Off by
    /// default; needed when some pose observes no landmark.
    pub odo_translation_rows: bool,
    pub optimize: OptimizeOptions,
}

/// Final map estimate. Landmarks carry their original dataset ids; landmarks
/// that were never observed have no estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedMap {
    pub poses: Vec<Pose2>,
    pub landmarks: Vec<(usize, Vector2<f64>)>,
}

/// Diagnostics from one solver run.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub n_poses: usize,
    pub n_observed_landmarks: usize,
    pub n_rotation_edges: usize,
    pub n_loop_closures: usize,
    pub mle_iterations: usize,
    pub mle_converged: bool,
    pub mle_cost: f64,
    pub n_feature_rows: usize,
}

impl SolveReport {
    pub fn csv(&self) -> String {
        format!(
            "poses,observed_landmarks,rotation_edges,loop_closures,mle_iterations,mle_converged,mle_cost,feature_rows\n{},{},{},{},{},{},{},{}\n",
            self.n_poses,
            self.n_observed_landmarks,
            self.n_rotation_edges,
            self.n_loop_closures,
            self.mle_iterations,
            self.mle_converged,
            self.mle_cost,
            self.n_feature_rows
        )
    }
}

/// Run the separated pipeline on a dataset. The first ground-truth pose
/// anchors the gauge.
pub fn solve_dataset(ds: &Dataset, cfg: &PipelineConfig) -> Result<(SolvedMap, SolveReport)> {
    ds.validate()?;
    let n = ds.n_poses();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two poses".into()));
    }

    let by_pose = ds.obs_by_pose();
    let mut sets = Vec::with_capacity(n);
    for (k, obs) in by_pose.iter().enumerate() {
        let mut set = pairwise_relative_displacements(obs)?;
        set.pose_id = k;
        sets.push(set);
    }
    let odo_angles: Vec<OdometryAngle> = ds
        .odometry
        .iter()
        .map(|o| OdometryAngle { delta_theta: o.dtheta, var: o.var_t })
        .collect();

    let edges = compute_rotation_edges(&sets, &odo_angles, &cfg.edges)?;
    let n_loop_closures = edges.iter().filter(|e| e.kind == EdgeKind::LoopClosure).count();
    let n_rotation_edges = edges.len();

    let graph = OrientationGraph::new(n, edges)?;
    let anchor_theta = ds.poses_gt[0].theta;
    let theta0 = chain_initial_guess(&graph, anchor_theta)?;
    let report = optimize_orientations(&graph, &theta0, &cfg.optimize);
    if !report.converged && !report.stalled {
        return Err(Error::NoConvergence(format!(
            "orientation MLE stopped after {} iterations without meeting the gradient tolerance",
            report.iterations
        )));
    }
    let (omega, sigma) = orientation_information(&graph, 0)?;
    let heading = HeadingEstimate { theta: report.theta, omega, sigma, anchor: 0 };

    // Landmark ids observed at least once, remapped to dense indices.
    let mut observed: Vec<usize> = ds.observations.iter().map(|z| z.landmark_id).collect();
    observed.sort_unstable();
    observed.dedup();
    let mut dense = vec![usize::MAX; ds.landmarks_gt.len()];
    for (i, &id) in observed.iter().enumerate() {
        dense[id] = i;
    }

    let features: Vec<LocalFeaturePosition> = ds
        .observations
        .iter()
        .map(|z| {
            let mut f = invert_range_bearing(z);
            f.landmark_id = dense[f.landmark_id];
            f
        })
        .collect();
    let n_feature_rows = features.len();

    let odo_rows: Vec<OdometryTranslation> = if cfg.odo_translation_rows {
        ds.odometry
            .iter()
            .map(|o| OdometryTranslation {
                from_pose: o.from_pose,
                to_pose: o.to_pose,
                t: Vector2::new(o.dx, o.dy),
                cov: Matrix2::new(o.var_x, 0.0, 0.0, o.var_y),
            })
            .collect()
    } else {
        Vec::new()
    };

    // Joint position solve with relinearization. Each pass is one
    // Gauss-Newton step; a pass is accepted only if it lowers the exact
    // nonlinear cost, so a linearized step that bends the headings outside
    // the model's validity is discarded. The heading-fixed solve provides
    // the starting candidate.
    let anchor_position = ds.poses_gt[0].position();
    let mut lin = heading.theta.clone();
    let sys0 = assemble_global_system_at(
        &heading,
        &lin,
        &graph,
        &features,
        &odo_rows,
        observed.len(),
        anchor_position,
    )?;
    let mut est = sys0.solve_positions_fixed_theta()?;
    let mut cost = sys0.nonlinear_cost(&est)?;
    let mut candidate = sys0.solve_positions().ok();
    let mut sys = sys0;
    for _ in 0..10 {
        let Some(cand) = candidate.take() else { break };
        let cand_cost = sys.nonlinear_cost(&cand)?;
        if !(cand_cost < cost) {
            break;
        }
        let converged = (0..n)
            .map(|i| crate::geometry::wrap_angle(cand.poses[i].theta - est.poses[i].theta).abs())
            .fold(0.0f64, f64::max)
            < 1e-9;
        est = cand;
        cost = cand_cost;
        if converged {
            break;
        }
        // Advance the linearization point by wrapped increments so it stays
        // on the same angle branch as the heading prior.
        lin = nalgebra::DVector::from_fn(n, |i, _| {
            lin[i] + crate::geometry::wrap_angle(est.poses[i].theta - lin[i])
        });
        sys = assemble_global_system_at(
            &heading,
            &lin,
            &graph,
            &features,
            &odo_rows,
            observed.len(),
            anchor_position,
        )?;
        candidate = sys.solve_positions().ok();
    }

    let map = SolvedMap {
        poses: est.poses,
        landmarks: observed.iter().copied().zip(est.landmarks).collect(),
    };
    let report = SolveReport {
        n_poses: n,
        n_observed_landmarks: observed.len(),
        n_rotation_edges,
        n_loop_closures,
        mle_iterations: report.iterations,
        mle_converged: report.converged,
        mle_cost: report.cost,
        n_feature_rows,
    };
    Ok((map, report))
}
