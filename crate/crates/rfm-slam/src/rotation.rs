//! Linear relative-rotation estimation between pose pairs.
//!
//! Each common landmark pair seen from two poses constrains the relative
//! rotation linearly in the `[cos, sin]` parameters; successive poses fuse
//! these constraints with proprioceptive odometry.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{
    angle_from_params, dcm_from_angle, project_to_so2, wrap_angle, RotParams2, RotationMatrix2,
};
use crate::measurements::LocalDisplacementSet;

/// Maximum condition number accepted for the 2x2 normal matrix.
const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    OdometryFused,
    LoopClosure,
}

/// A relative-orientation measurement between two pose nodes.
/// `delta_theta` estimates `theta_to - theta_from`.
#[derive(Debug, Clone, Copy)]
pub struct RotationEdge {
    pub from_pose: usize,
    pub to_pose: usize,
    pub delta_theta: f64,
    pub var: f64,
    pub kind: EdgeKind,
}

/// An odometry estimate of the heading increment between successive poses.
#[derive(Debug, Clone, Copy)]
pub struct OdometryAngle {
    pub delta_theta: f64,
    pub var: f64,
}

/// Stacked linear system `z = B c + v` for one relative rotation.
#[derive(Debug, Clone)]
pub struct RelRotSystem {
    pub z: DVector<f64>,
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Gating parameters for loop-closure edge selection.
#[derive(Debug, Clone, Copy)]
pub struct EdgeConfig {
    /// Minimum pose-index gap for a loop-closure edge.
    pub g_min: usize,
    /// Maximum loop-closure edges per pose.
    pub e_max: usize,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig { g_min: 10, e_max: 5 }
    }
}

/// A planned edge before its rotation has been solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgePlan {
    pub from_pose: usize,
    pub to_pose: usize,
    pub kind: EdgeKind,
    pub shared_pairs: usize,
}

/// Stack the relative-rotation constraints between two poses.
///
/// Feature rows follow `d_p = C_qp d_q` per common landmark pair; the
/// covariance of each stacked block is `R'_p + C_init R'_q C_init^T`. When an
/// odometry measurement is present its `[cos, sin]` observation is prepended
/// with an identity design block.
pub fn build_relative_rotation_system(
    dp: &LocalDisplacementSet,
    dq: &LocalDisplacementSet,
    c_init: &RotationMatrix2,
    odo: Option<OdometryAngle>,
) -> Result<RelRotSystem> {
    // The full pairwise set is linearly dependent (only L-1 of the L(L-1)/2
    // displacements over L shared landmarks are independent), which makes its
    // covariance singular. Solve on a spanning star subset anchored at the
    // smallest shared landmark; it carries the same information with an
    // invertible covariance.
    let common = spanning_subset(dp, common_pair_indices(dp, dq));
    if common.is_empty() && odo.is_none() {
        return Err(Error::UnconstrainedRotation(format!(
            "poses {} and {} share no landmark pairs and no odometry",
            dp.pose_id, dq.pose_id
        )));
    }

    let m = common.len();
    let odo_rows = if odo.is_some() { 2 } else { 0 };
    let rows = odo_rows + 2 * m;
    let mut z = DVector::zeros(rows);
    let mut b = DMatrix::zeros(rows, 2);
    let mut r = DMatrix::zeros(rows, rows);

    if let Some(o) = odo {
        let (s, c) = o.delta_theta.sin_cos();
        z[0] = c;
        z[1] = s;
        b.view_mut((0, 0), (2, 2)).copy_from(&Matrix2::identity());
        // First-order propagation of the angle variance through [cos, sin]
        // is rank one; an isotropic sigma^2 I keeps the block invertible with
        // the same tangential weight.
        r.view_mut((0, 0), (2, 2))
            .copy_from(&(Matrix2::identity() * o.var));
    }

    // Submatrices of the displacement covariances for the common pairs.
    let rp = select_cov(&dp.cov, common.iter().map(|&(i, _)| i));
    let rq = select_cov(&dq.cov, common.iter().map(|&(_, j)| j));
    let mut rot_blk = DMatrix::zeros(2 * m, 2 * m);
    for k in 0..m {
        rot_blk.view_mut((2 * k, 2 * k), (2, 2)).copy_from(c_init.matrix());
    }
    let r_feat = &rp + &rot_blk * rq * rot_blk.transpose();
    r.view_mut((odo_rows, odo_rows), (2 * m, 2 * m)).copy_from(&r_feat);

    for (k, &(ip, iq)) in common.iter().enumerate() {
        let dpv = dp.displacement(ip);
        let dqv = dq.displacement(iq);
        let row = odo_rows + 2 * k;
        z[row] = dpv.x;
        z[row + 1] = dpv.y;
        b.view_mut((row, 0), (2, 2))
            .copy_from(&Matrix2::new(dqv.x, -dqv.y, dqv.y, dqv.x));
    }

    Ok(RelRotSystem { z, b, r })
}

/// Solve the weighted least-squares problem for one relative rotation and
/// return the edge with a projected scalar variance.
pub fn solve_relative_rotation(
    sys: &RelRotSystem,
    from_pose: usize,
    to_pose: usize,
    kind: EdgeKind,
) -> Result<RotationEdge> {
    let w = sys
        .r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::UnconstrainedRotation("observation covariance not PD".into()))?
        .inverse();
    let bt_w = sys.b.transpose() * w;
    let normal: Matrix2<f64> = (&bt_w * &sys.b).fixed_view::<2, 2>(0, 0).into_owned();

    let eig = normal.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || hi / lo > COND_LIMIT {
        return Err(Error::UnconstrainedRotation(format!(
            "normal matrix ill conditioned (eigenvalues {lo:.3e}, {hi:.3e})"
        )));
    }

    let sigma_c = normal
        .try_inverse()
        .ok_or_else(|| Error::UnconstrainedRotation("singular normal matrix".into()))?;
    let rhs = &bt_w * &sys.z;
    let c_hat = sigma_c * Vector2::new(rhs[0], rhs[1]);

    let projected = project_to_so2(&RotParams2 { c: c_hat, sigma: sigma_c })?;
    let angle = angle_from_params(&projected)?;
    let var = angle.var.expect("projected params carry a variance");
    if !(var > 0.0) || !angle.theta.is_finite() {
        return Err(Error::UnconstrainedRotation(format!(
            "degenerate edge estimate (theta {}, var {var})",
            angle.theta
        )));
    }
    Ok(RotationEdge {
        from_pose,
        to_pose,
        delta_theta: angle.theta,
        var,
        kind,
    })
}

/// Decide which pose pairs get rotation edges: every successive pair, plus
/// loop closures for non-successive pairs with at least one shared landmark
/// pair and an index gap of at least `g_min`, capped at `e_max` loop-closure
/// edges per pose by shared-pair count.
pub fn detect_rotation_edges(sets: &[LocalDisplacementSet], cfg: &EdgeConfig) -> Vec<EdgePlan> {
    let n = sets.len();
    let mut plans: Vec<EdgePlan> = (0..n.saturating_sub(1))
        .map(|k| EdgePlan {
            from_pose: k,
            to_pose: k + 1,
            kind: EdgeKind::OdometryFused,
            shared_pairs: common_pair_indices(&sets[k], &sets[k + 1]).len(),
        })
        .collect();

    // Inverted index from landmark pair to the poses that observed it.
    let mut seen: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for set in sets {
        for &key in &set.pairs {
            seen.entry(key).or_default().push(set.pose_id);
        }
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for poses in seen.values() {
        for (a, &p) in poses.iter().enumerate() {
            for &q in &poses[a + 1..] {
                let key = if p < q { (p, q) } else { (q, p) };
                if key.1 - key.0 >= cfg.g_min {
                    *shared.entry(key).or_insert(0) += 1;
                }
            }
        }
    }

    let mut candidates: Vec<((usize, usize), usize)> = shared.into_iter().collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut degree = vec![0usize; n];
    for ((p, q), count) in candidates {
        if degree[p] >= cfg.e_max || degree[q] >= cfg.e_max {
            continue;
        }
        degree[p] += 1;
        degree[q] += 1;
        plans.push(EdgePlan {
            from_pose: p,
            to_pose: q,
            kind: EdgeKind::LoopClosure,
            shared_pairs: count,
        });
    }
    plans
}

/// Build and solve all rotation edges for a dataset: successive edges fused
/// with odometry, then loop closures initialized from the chained successive
/// estimates.
pub fn compute_rotation_edges(
    sets: &[LocalDisplacementSet],
    odom: &[OdometryAngle],
    cfg: &EdgeConfig,
) -> Result<Vec<RotationEdge>> {
    let n = sets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if odom.len() != n - 1 {
        return Err(Error::InvalidInput(format!(
            "expected {} odometry records for {} poses, got {}",
            n - 1,
            n,
            odom.len()
        )));
    }

    let plans = detect_rotation_edges(sets, cfg);
    let mut edges = Vec::with_capacity(plans.len());

    // Successive edges first; they define the chained initial headings.
    let mut chained = vec![0.0f64; n];
    for plan in plans.iter().filter(|p| p.kind == EdgeKind::OdometryFused) {
        let k = plan.from_pose;
        let odo = odom[k];
        let c_init = dcm_from_angle(odo.delta_theta)?;
        let sys = build_relative_rotation_system(&sets[k], &sets[k + 1], &c_init, Some(odo))?;
        let edge = solve_relative_rotation(&sys, k, k + 1, EdgeKind::OdometryFused)?;
        chained[k + 1] = wrap_angle(chained[k] + edge.delta_theta);
        edges.push(edge);
    }

    for plan in plans.iter().filter(|p| p.kind == EdgeKind::LoopClosure) {
        let (p, q) = (plan.from_pose, plan.to_pose);
        let c_init = dcm_from_angle(wrap_angle(chained[q] - chained[p]))?;
        let sys = build_relative_rotation_system(&sets[p], &sets[q], &c_init, None)?;
        // A badly conditioned loop-closure system only costs us one edge.
        if let Ok(edge) = solve_relative_rotation(&sys, p, q, EdgeKind::LoopClosure) {
            edges.push(edge);
        }
    }
    Ok(edges)
}

/// Keep only the pairs anchored at the smallest landmark id present in the
/// common set; a spanning subset with linearly independent displacements.
fn spanning_subset(
    dp: &LocalDisplacementSet,
    common: Vec<(usize, usize)>,
) -> Vec<(usize, usize)> {
    let Some(anchor) = common.iter().map(|&(i, _)| dp.pairs[i].0).min() else {
        return common;
    };
    common
        .into_iter()
        .filter(|&(i, _)| dp.pairs[i].0 == anchor)
        .collect()
}

/// Indices into `dp.pairs` and `dq.pairs` of the shared landmark pairs.
fn common_pair_indices(
    dp: &LocalDisplacementSet,
    dq: &LocalDisplacementSet,
) -> Vec<(usize, usize)> {
    let index: HashMap<(usize, usize), usize> =
        dq.pairs.iter().enumerate().map(|(j, &k)| (k, j)).collect();
    dp.pairs
        .iter()
        .enumerate()
        .filter_map(|(i, key)| index.get(key).map(|&j| (i, j)))
        .collect()
}

/// Extract the covariance submatrix for the selected pair blocks.
fn select_cov(cov: &DMatrix<f64>, idx: impl Iterator<Item = usize> + Clone) -> DMatrix<f64> {
    let sel: Vec<usize> = idx.collect();
    let m = sel.len();
    let mut out = DMatrix::zeros(2 * m, 2 * m);
    for (a, &i) in sel.iter().enumerate() {
        for (b, &j) in sel.iter().enumerate() {
            out.view_mut((2 * a, 2 * b), (2, 2))
                .copy_from(&cov.view((2 * i, 2 * j), (2, 2)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::pairwise_relative_displacements;
    use crate::measurements::RangeBearing;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Noise-free displacement sets for two poses seeing the same landmarks.
    fn sets_for_rotation(
        lms: &[Vector2<f64>],
        theta_p: f64,
        theta_q: f64,
        var: f64,
    ) -> (LocalDisplacementSet, LocalDisplacementSet) {
        let observe = |pose: usize, theta: f64| {
            let rot = dcm_from_angle(theta).unwrap();
            let obs: Vec<RangeBearing> = lms
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let local = rot.transposed().rotate(l);
                    RangeBearing {
                        pose_id: pose,
                        landmark_id: i,
                        range: local.norm(),
                        bearing: local.y.atan2(local.x),
                        sigma_r2: var,
                        sigma_b2: var,
                    }
                })
                .collect();
            pairwise_relative_displacements(&obs).unwrap()
        };
        (observe(0, theta_p), observe(1, theta_q))
    }

    fn test_landmarks(n: usize, seed: u64) -> Vec<Vector2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn b_block_patterns() {
        let dq_x = Vector2::new(1.0, 0.0);
        assert_relative_eq!(
            Matrix2::new(dq_x.x, -dq_x.y, dq_x.y, dq_x.x),
            Matrix2::identity()
        );
        let dq_y = Vector2::new(0.0, 1.0);
        assert_relative_eq!(
            Matrix2::new(dq_y.x, -dq_y.y, dq_y.y, dq_y.x),
            Matrix2::new(0.0, -1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn odometry_only_system() {
        let empty = LocalDisplacementSet {
            pose_id: 0,
            pairs: vec![],
            d: nalgebra::DVector::zeros(0),
            cov: nalgebra::DMatrix::zeros(0, 0),
        };
        let empty2 = LocalDisplacementSet { pose_id: 1, ..empty.clone() };
        let odo = OdometryAngle { delta_theta: 0.0, var: 0.01 };
        let sys = build_relative_rotation_system(
            &empty,
            &empty2,
            &dcm_from_angle(0.0).unwrap(),
            Some(odo),
        )
        .unwrap();
        assert_eq!(sys.z.len(), 2);
        assert_relative_eq!(sys.z[0], 1.0);
        assert_relative_eq!(sys.z[1], 0.0);
        assert_relative_eq!(sys.b.clone_owned(), nalgebra::DMatrix::identity(2, 2));
        let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::OdometryFused).unwrap();
        assert_relative_eq!(edge.delta_theta, 0.0);
        assert_relative_eq!(edge.var, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn no_constraints_is_an_error() {
        let empty = LocalDisplacementSet {
            pose_id: 0,
            pairs: vec![],
            d: nalgebra::DVector::zeros(0),
            cov: nalgebra::DMatrix::zeros(0, 0),
        };
        let empty2 = LocalDisplacementSet { pose_id: 1, ..empty.clone() };
        let out =
            build_relative_rotation_system(&empty, &empty2, &dcm_from_angle(0.0).unwrap(), None);
        assert!(matches!(out, Err(Error::UnconstrainedRotation(_))));
    }

    #[test]
    fn noise_free_pair_recovers_exact_rotation() {
        let lms = test_landmarks(2, 3);
        let delta = PI / 4.0;
        let (dp, dq) = sets_for_rotation(&lms, 0.2, 0.2 + delta, 1e-4);
        let sys =
            build_relative_rotation_system(&dp, &dq, &dcm_from_angle(delta).unwrap(), None)
                .unwrap();
        let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure).unwrap();
        assert_relative_eq!(edge.delta_theta, delta, epsilon = 1e-10);
    }

    #[test]
    fn noise_free_solution_independent_of_weights() {
        let lms = test_landmarks(4, 5);
        let delta = -1.1;
        for var in [1e-6, 1e-2, 1.0] {
            let (dp, dq) = sets_for_rotation(&lms, 0.7, 0.7 + delta, var);
            let sys =
                build_relative_rotation_system(&dp, &dq, &dcm_from_angle(delta).unwrap(), None)
                    .unwrap();
            let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure).unwrap();
            assert_relative_eq!(edge.delta_theta, delta, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_invariance_of_estimator() {
        let lms = test_landmarks(4, 9);
        let delta = 0.6;
        let (dp, dq) = sets_for_rotation(&lms, 0.0, delta, 1e-3);
        let solve = |dp: &LocalDisplacementSet, dq: &LocalDisplacementSet| {
            let sys =
                build_relative_rotation_system(dp, dq, &dcm_from_angle(delta).unwrap(), None)
                    .unwrap();
            solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure).unwrap()
        };
        let base = solve(&dp, &dq);

        // Rotate both frames by a common rotation G.
        let g = dcm_from_angle(0.9).unwrap();
        let rotate_set = |set: &LocalDisplacementSet| {
            let m = set.pairs.len();
            let mut blk = DMatrix::zeros(2 * m, 2 * m);
            for k in 0..m {
                blk.view_mut((2 * k, 2 * k), (2, 2)).copy_from(g.matrix());
            }
            LocalDisplacementSet {
                pose_id: set.pose_id,
                pairs: set.pairs.clone(),
                d: &blk * &set.d,
                cov: &blk * &set.cov * blk.transpose(),
            }
        };
        let rotated = solve(&rotate_set(&dp), &rotate_set(&dq));
        assert_relative_eq!(base.delta_theta, rotated.delta_theta, epsilon = 1e-10);
    }

    #[test]
    fn variance_weakly_decreases_with_more_pairs() {
        let lms = test_landmarks(5, 17);
        let delta = 0.3;
        let (dp, dq) = sets_for_rotation(&lms, 0.0, delta, 1e-3);
        let mut last = f64::INFINITY;
        for take in 2..=lms.len() {
            let trim = |set: &LocalDisplacementSet| {
                let keep: Vec<usize> = set
                    .pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(i, j))| i < take && j < take)
                    .map(|(k, _)| k)
                    .collect();
                let m = keep.len();
                let mut d = DVector::zeros(2 * m);
                for (a, &k) in keep.iter().enumerate() {
                    d[2 * a] = set.d[2 * k];
                    d[2 * a + 1] = set.d[2 * k + 1];
                }
                LocalDisplacementSet {
                    pose_id: set.pose_id,
                    pairs: keep.iter().map(|&k| set.pairs[k]).collect(),
                    d,
                    cov: select_cov(&set.cov, keep.iter().copied()),
                }
            };
            let sys = build_relative_rotation_system(
                &trim(&dp),
                &trim(&dq),
                &dcm_from_angle(delta).unwrap(),
                None,
            )
            .unwrap();
            let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure).unwrap();
            assert!(edge.var <= last * (1.0 + 1e-9), "var grew: {} > {}", edge.var, last);
            last = edge.var;
        }
    }

    // Noisy system checked against a 1-D grid search over the angle.
    #[test]
    fn noisy_system_matches_grid_oracle() {
        let lms = test_landmarks(5, 23);
        let delta = 0.85;
        let (dp, dq_clean) = sets_for_rotation(&lms, 0.1, 0.1 + delta, 4e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut dq = dq_clean.clone();
        for v in dq.d.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let mut dp_noisy = dp.clone();
        for v in dp_noisy.d.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let sys = build_relative_rotation_system(
            &dp_noisy,
            &dq,
            &dcm_from_angle(delta).unwrap(),
            None,
        )
        .unwrap();
        let edge = solve_relative_rotation(&sys, 0, 1, EdgeKind::LoopClosure).unwrap();

        // Brute-force weighted residual over the unit circle.
        let w = sys.r.clone().cholesky().unwrap().inverse();
        let mut best = (f64::INFINITY, 0.0);
        let step = 1e-4;
        let mut t = -PI;
        while t < PI {
            let (s, c) = t.sin_cos();
            let cvec = nalgebra::Vector2::new(c, s);
            let r = &sys.z - &sys.b * cvec;
            let cost = (r.transpose() * &w * &r)[(0, 0)];
            if cost < best.0 {
                best = (cost, t);
            }
            t += step;
        }
        assert!(
            (edge.delta_theta - best.1).abs() < 1e-3,
            "solver {} vs grid {}",
            edge.delta_theta,
            best.1
        );
    }

    #[test]
    fn edge_detection_rules() {
        // Pose sets: poses 0..=12; poses 0 and 12 share two landmarks (one pair),
        // poses 1 and 12 share only one landmark (no pair).
        let mk = |pose: usize, pairs: Vec<(usize, usize)>| LocalDisplacementSet {
            pose_id: pose,
            d: DVector::zeros(2 * pairs.len()),
            cov: DMatrix::identity(2 * pairs.len(), 2 * pairs.len()),
            pairs,
        };
        let mut sets: Vec<LocalDisplacementSet> = (0..13).map(|p| mk(p, vec![])).collect();
        sets[0] = mk(0, vec![(4, 7)]);
        sets[12] = mk(12, vec![(4, 7)]);
        let plans = detect_rotation_edges(&sets, &EdgeConfig::default());
        let lc: Vec<_> = plans.iter().filter(|p| p.kind == EdgeKind::LoopClosure).collect();
        assert_eq!(lc.len(), 1);
        assert_eq!((lc[0].from_pose, lc[0].to_pose), (0, 12));
        // N-1 odometry-fused edges.
        let odo = plans.iter().filter(|p| p.kind == EdgeKind::OdometryFused).count();
        assert_eq!(odo, 12);

        // Gap below g_min: no loop closure.
        let mut sets: Vec<LocalDisplacementSet> = (0..6).map(|p| mk(p, vec![])).collect();
        sets[0] = mk(0, vec![(1, 2)]);
        sets[5] = mk(5, vec![(1, 2)]);
        let plans = detect_rotation_edges(&sets, &EdgeConfig::default());
        assert!(plans.iter().all(|p| p.kind == EdgeKind::OdometryFused));
    }
}
