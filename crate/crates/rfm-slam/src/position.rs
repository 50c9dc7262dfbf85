//! Global position estimation: transform local robot-to-feature measurements
//! into the world frame with the estimated headings, stack them with the
//! heading estimates, and solve one sparse weighted linear least-squares
//! problem for every robot and landmark position.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{dcm_derivative, dcm_from_angle, Pose2};
use crate::measurements::LocalFeaturePosition;
use crate::orientation::{HeadingEstimate, OrientationGraph};
use crate::sparse::TripletMatrix;

/// Pose-to-pose translation measurement in the frame of the earlier pose.
/// Optional rows that keep the system full rank when a pose sees no landmark.
#[derive(Debug, Clone, Copy)]
pub struct OdometryTranslation {
    pub from_pose: usize,
    pub to_pose: usize,
    pub t: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

/// What the world-frame displacement row points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Landmark(usize),
    Pose(usize),
}

/// One 2-row block of the stacked measurement vector.
#[derive(Debug, Clone, Copy)]
struct MeasRow {
    pose: usize,
    target: Target,
    /// World-frame measurement, anchor contribution folded in.
    gamma: Vector2<f64>,
    /// Inverse of the world-frame measurement covariance.
    w: Matrix2<f64>,
    /// World-frame covariance (kept for the explicit R_gamma oracle).
    w_cov: Matrix2<f64>,
    /// Heading coupling column dC/dtheta * local measurement; zero at the
    /// anchor pose whose heading is fixed.
    m: Vector2<f64>,
}

/// The assembled stacked system. Unknowns are ordered
/// `[p_1 .. p_{N-1}, l_0 .. l_{L-1}, theta_1 .. theta_{N-1}]`; pose 0 is the
/// anchor and enters as a known constant.
#[derive(Debug, Clone)]
pub struct GlobalLinearSystem {
    pub n_poses: usize,
    pub n_landmarks: usize,
    rows: Vec<MeasRow>,
    /// Heading information matrix over non-anchor nodes, as triplets.
    omega_theta: Vec<(usize, usize, f64)>,
    /// Gauge-fixed heading estimates, all nodes; prior mean for the theta
    /// block.
    theta_hat: DVector<f64>,
    /// Linearization point of the rotation terms; equals `theta_hat` unless
    /// the caller relinearizes.
    theta_lin: DVector<f64>,
    anchor_position: Vector2<f64>,
}

/// Solution of the global linear problem.
#[derive(Debug, Clone)]
pub struct SlamEstimate {
    pub poses: Vec<Pose2>,
    pub landmarks: Vec<Vector2<f64>>,
}

pub fn assemble_global_system(
    heading: &HeadingEstimate,
    graph: &OrientationGraph,
    meas: &[LocalFeaturePosition],
    odo_translations: &[OdometryTranslation],
    n_landmarks: usize,
    anchor_position: Vector2<f64>,
) -> Result<GlobalLinearSystem> {
    assemble_global_system_at(
        heading,
        &heading.theta.clone(),
        graph,
        meas,
        odo_translations,
        n_landmarks,
        anchor_position,
    )
}

/// Assemble with the rotation terms linearized at `theta_lin` instead of the
/// heading estimate; the heading prior stays centered on the estimate. Used
/// to iterate the position solve when the first step leaves the linear
/// region.
pub fn assemble_global_system_at(
    heading: &HeadingEstimate,
    theta_lin: &DVector<f64>,
    graph: &OrientationGraph,
    meas: &[LocalFeaturePosition],
    odo_translations: &[OdometryTranslation],
    n_landmarks: usize,
    anchor_position: Vector2<f64>,
) -> Result<GlobalLinearSystem> {
    let n_poses = graph.n_nodes;
    if theta_lin.len() != heading.theta.len() {
        return Err(Error::InvalidArgument(
            "linearization point and heading estimate differ in length".into(),
        ));
    }
    if heading.anchor != 0 {
        return Err(Error::InvalidArgument("anchor must be pose 0".into()));
    }
    if heading.theta.len() != n_poses {
        return Err(Error::InvalidArgument(format!(
            "heading count {} does not match pose count {}",
            heading.theta.len(),
            n_poses
        )));
    }

    let mut rows = Vec::with_capacity(meas.len() + odo_translations.len());
    for f in meas {
        if f.pose_id >= n_poses {
            return Err(Error::InvalidInput(format!("measurement at unknown pose {}", f.pose_id)));
        }
        if f.landmark_id >= n_landmarks {
            return Err(Error::InvalidInput(format!(
                "measurement of unknown landmark {}",
                f.landmark_id
            )));
        }
        rows.push(make_row(
            f.pose_id,
            Target::Landmark(f.landmark_id),
            &f.delta,
            &f.cov,
            theta_lin,
            anchor_position,
        )?);
    }
    for o in odo_translations {
        if o.to_pose != o.from_pose + 1 || o.to_pose >= n_poses {
            return Err(Error::InvalidInput(format!(
                "odometry translation {} -> {} is not a successive pair",
                o.from_pose, o.to_pose
            )));
        }
        rows.push(make_row(
            o.from_pose,
            Target::Pose(o.to_pose),
            &o.t,
            &o.cov,
            theta_lin,
            anchor_position,
        )?);
    }

    // Every non-anchor pose and every landmark needs at least one row.
    let mut pose_seen = vec![false; n_poses];
    let mut lm_seen = vec![false; n_landmarks];
    pose_seen[0] = true;
    for r in &rows {
        pose_seen[r.pose] = true;
        match r.target {
            Target::Landmark(j) => lm_seen[j] = true,
            Target::Pose(k) => pose_seen[k] = true,
        }
    }
    if let Some(k) = pose_seen.iter().position(|&s| !s) {
        return Err(Error::RankDeficient(format!(
            "pose {k} has no constraining measurement; enable odometry translation rows or check the dataset"
        )));
    }
    if let Some(j) = lm_seen.iter().position(|&s| !s) {
        return Err(Error::RankDeficient(format!("landmark {j} is never observed")));
    }

    let reduced = |i: usize| i.checked_sub(1);
    let mut omega_theta = Vec::with_capacity(4 * graph.edges.len());
    for e in &graph.edges {
        let w = 1.0 / e.var;
        let a = reduced(e.from_pose);
        let b = reduced(e.to_pose);
        if let Some(a) = a {
            omega_theta.push((a, a, w));
        }
        if let Some(b) = b {
            omega_theta.push((b, b, w));
        }
        if let (Some(a), Some(b)) = (a, b) {
            omega_theta.push((a, b, -w));
            omega_theta.push((b, a, -w));
        }
    }

    Ok(GlobalLinearSystem {
        n_poses,
        n_landmarks,
        rows,
        omega_theta,
        theta_hat: heading.theta.clone(),
        theta_lin: theta_lin.clone(),
        anchor_position,
    })
}

fn make_row(
    pose: usize,
    target: Target,
    local: &Vector2<f64>,
    local_cov: &Matrix2<f64>,
    theta_lin: &DVector<f64>,
    anchor_position: Vector2<f64>,
) -> Result<MeasRow> {
    let theta = theta_lin[pose];
    let rot = dcm_from_angle(theta)?;
    let w_cov = rot.matrix() * local_cov * rot.matrix().transpose();
    let w = w_cov
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient(format!("singular measurement covariance at pose {pose}")))?;
    let mut gamma = rot.rotate(local);
    if pose == 0 {
        gamma += anchor_position;
    }
    let m = if pose == 0 { Vector2::zeros() } else { dcm_derivative(theta) * local };
    Ok(MeasRow { pose, target, gamma, w, w_cov, m })
}

impl GlobalLinearSystem {
    fn pose_col(&self, k: usize) -> Option<usize> {
        k.checked_sub(1).map(|i| 2 * i)
    }

    fn lm_col(&self, j: usize) -> usize {
        2 * (self.n_poses - 1) + 2 * j
    }

    fn theta_col(&self, k: usize) -> Option<usize> {
        k.checked_sub(1)
            .map(|i| 2 * (self.n_poses - 1) + 2 * self.n_landmarks + i)
    }

    pub fn n_unknowns(&self) -> usize {
        3 * (self.n_poses - 1) + 2 * self.n_landmarks
    }

    /// Variables with a `+/-I` block in one measurement row:
    /// `(column, sign)`, anchor columns omitted.
    fn row_vars(&self, r: &MeasRow) -> Vec<(usize, f64)> {
        let mut vars = Vec::with_capacity(2);
        match r.target {
            Target::Landmark(j) => vars.push((self.lm_col(j), 1.0)),
            Target::Pose(k) => {
                if let Some(c) = self.pose_col(k) {
                    vars.push((c, 1.0));
                }
            }
        }
        if let Some(c) = self.pose_col(r.pose) {
            vars.push((c, -1.0));
        }
        vars
    }

    /// Solve the anchored normal equations by sparse Cholesky.
    pub fn solve_positions(&self) -> Result<SlamEstimate> {
        let dim = self.n_unknowns();
        let mut normal = TripletMatrix::new(dim);
        let mut rhs = DVector::zeros(dim);
        let theta_red =
            DVector::from_fn(self.n_poses - 1, |i, _| self.theta_hat[i + 1]);

        for r in &self.rows {
            let vars = self.row_vars(r);
            let tcol = self.theta_col(r.pose);
            let wm = r.w * r.m;
            let theta_k = self.theta_lin[r.pose];
            // Effective top-block information contribution of this row.
            for &(ca, sa) in &vars {
                for &(cb, sb) in &vars {
                    let s = sa * sb;
                    for i in 0..2 {
                        for j in 0..2 {
                            normal.add(ca + i, cb + j, s * r.w[(i, j)]);
                        }
                    }
                }
                // Coupling between position variables and the pose heading.
                if let Some(tc) = tcol {
                    for i in 0..2 {
                        normal.add_sym(ca + i, tc, -sa * wm[i]);
                    }
                }
                let top = r.w * r.gamma - wm * theta_k;
                rhs[ca] += sa * top[0];
                rhs[ca + 1] += sa * top[1];
            }
            if let Some(tc) = tcol {
                let mwm = r.m.dot(&wm);
                normal.add(tc, tc, mwm);
                rhs[tc] += -r.m.dot(&(r.w * r.gamma)) + mwm * theta_k;
            }
        }

        // Heading block: Omega_theta plus the per-row couplings added above.
        let toff = 2 * (self.n_poses - 1) + 2 * self.n_landmarks;
        for &(a, b, v) in &self.omega_theta {
            normal.add(toff + a, toff + b, v);
        }
        let omega_dense_times_theta = {
            let mut out = DVector::<f64>::zeros(self.n_poses - 1);
            for &(a, b, v) in &self.omega_theta {
                out[a] += v * theta_red[b];
            }
            out
        };
        for i in 0..self.n_poses - 1 {
            rhs[toff + i] += omega_dense_times_theta[i];
        }

        let x = normal.solve_spd(&rhs).map_err(|e| {
            Error::Factorization(format!(
                "position normal equations could not be factorized ({e}); the system is rank deficient or badly conditioned"
            ))
        })?;

        let mut poses = Vec::with_capacity(self.n_poses);
        poses.push(Pose2::new(self.anchor_position.x, self.anchor_position.y, self.theta_hat[0]));
        for k in 1..self.n_poses {
            let c = self.pose_col(k).unwrap();
            let t = self.theta_col(k).unwrap();
            poses.push(Pose2::new(x[c], x[c + 1], x[t]));
        }
        let landmarks = (0..self.n_landmarks)
            .map(|j| {
                let c = self.lm_col(j);
                Vector2::new(x[c], x[c + 1])
            })
            .collect();
        Ok(SlamEstimate { poses, landmarks })
    }

    /// Solve for positions only, holding every heading at the linearization
    /// point. Used as a damped fallback when the joint solve leaves the
    /// linear region.
    pub fn solve_positions_fixed_theta(&self) -> Result<SlamEstimate> {
        let dim = 2 * (self.n_poses - 1) + 2 * self.n_landmarks;
        let mut normal = TripletMatrix::new(dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for r in &self.rows {
            let vars = self.row_vars(r);
            for &(ca, sa) in &vars {
                for &(cb, sb) in &vars {
                    let s = sa * sb;
                    for i in 0..2 {
                        for j in 0..2 {
                            normal.add(ca + i, cb + j, s * r.w[(i, j)]);
                        }
                    }
                }
                let top = r.w * r.gamma;
                rhs[ca] += sa * top[0];
                rhs[ca + 1] += sa * top[1];
            }
        }
        let x = normal.solve_spd(&rhs).map_err(|e| {
            Error::Factorization(format!(
                "position normal equations could not be factorized ({e}); the system is rank deficient or badly conditioned"
            ))
        })?;
        let mut poses = Vec::with_capacity(self.n_poses);
        poses.push(Pose2::new(self.anchor_position.x, self.anchor_position.y, self.theta_hat[0]));
        for k in 1..self.n_poses {
            let c = self.pose_col(k).unwrap();
            poses.push(Pose2::new(x[c], x[c + 1], self.theta_hat[k]));
        }
        let landmarks = (0..self.n_landmarks)
            .map(|j| {
                let c = self.lm_col(j);
                Vector2::new(x[c], x[c + 1])
            })
            .collect();
        Ok(SlamEstimate { poses, landmarks })
    }

    /// Exact weighted cost of an estimate under the original (nonlinear)
    /// measurement model: local-frame feature residuals plus the heading
    /// prior. Lets callers compare candidate solutions across linearization
    /// points.
    pub fn nonlinear_cost(&self, est: &SlamEstimate) -> Result<f64> {
        if est.poses.len() != self.n_poses || est.landmarks.len() != self.n_landmarks {
            return Err(Error::InvalidArgument("estimate size does not match system".into()));
        }
        let mut cost = 0.0;
        for r in &self.rows {
            // Undo the assembly-time rotation to recover the local-frame
            // measurement and weight; both are linearization independent.
            let rot_lin = dcm_from_angle(self.theta_lin[r.pose])?;
            let mut g = r.gamma;
            if r.pose == 0 {
                g -= self.anchor_position;
            }
            let local = rot_lin.transposed().rotate(&g);
            let w_local = rot_lin.matrix().transpose() * r.w * rot_lin.matrix();

            let pose = &est.poses[r.pose];
            let target = match r.target {
                Target::Landmark(j) => est.landmarks[j],
                Target::Pose(k) => est.poses[k].position(),
            };
            let rot = dcm_from_angle(pose.theta)?;
            let res = rot.transposed().rotate(&(target - pose.position())) - local;
            cost += res.dot(&(w_local * res));
        }
        for &(a, b, v) in &self.omega_theta {
            let da = est.poses[a + 1].theta - self.theta_hat[a + 1];
            let db = est.poses[b + 1].theta - self.theta_hat[b + 1];
            cost += da * v * db;
        }
        Ok(cost)
    }

    // Dense views used by tests and the consistency checks below. These are
    // quadratic in problem size; keep them off the solve path.

    pub fn gamma_dense(&self) -> DVector<f64> {
        let m = self.rows.len();
        let t = self.n_poses - 1;
        let mut g = DVector::zeros(2 * m + t);
        for (i, r) in self.rows.iter().enumerate() {
            g[2 * i] = r.gamma.x;
            g[2 * i + 1] = r.gamma.y;
        }
        for k in 1..self.n_poses {
            g[2 * m + k - 1] = self.theta_hat[k];
        }
        g
    }

    pub fn a_dense(&self) -> DMatrix<f64> {
        let m = self.rows.len();
        let t = self.n_poses - 1;
        let mut a = DMatrix::zeros(2 * m + t, self.n_unknowns());
        for (i, r) in self.rows.iter().enumerate() {
            for (c, s) in self.row_vars(r) {
                a[(2 * i, c)] += s;
                a[(2 * i + 1, c + 1)] += s;
            }
        }
        let toff = 2 * (self.n_poses - 1) + 2 * self.n_landmarks;
        for k in 0..t {
            a[(2 * m + k, toff + k)] = 1.0;
        }
        a
    }

    /// The stacked heading-coupling matrix `M` evaluated at the heading
    /// estimate.
    pub fn m_dense(&self) -> DMatrix<f64> {
        let m = self.rows.len();
        let t = self.n_poses - 1;
        let mut out = DMatrix::zeros(2 * m, t);
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(k) = r.pose.checked_sub(1) {
                out[(2 * i, k)] = r.m.x;
                out[(2 * i + 1, k)] = r.m.y;
            }
        }
        out
    }

    /// Block-diagonal world-frame measurement covariance.
    pub fn world_cov_dense(&self) -> DMatrix<f64> {
        let m = self.rows.len();
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        for (i, r) in self.rows.iter().enumerate() {
            out.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&r.w_cov);
        }
        out
    }

    pub fn omega_theta_dense(&self) -> DMatrix<f64> {
        let t = self.n_poses - 1;
        let mut out = DMatrix::zeros(t, t);
        for &(a, b, v) in &self.omega_theta {
            out[(a, b)] += v;
        }
        out
    }

    /// Information matrix of the stacked measurement vector, built from the
    /// closed-form blocks (never by inverting `R_gamma`).
    pub fn omega_gamma_dense(&self) -> DMatrix<f64> {
        let m = self.rows.len();
        let t = self.n_poses - 1;
        let dim = 2 * m + t;
        let mut out = DMatrix::zeros(dim, dim);
        for (i, r) in self.rows.iter().enumerate() {
            out.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&r.w);
            if let Some(k) = r.pose.checked_sub(1) {
                let wm = r.w * r.m;
                out[(2 * i, 2 * m + k)] = -wm.x;
                out[(2 * i + 1, 2 * m + k)] = -wm.y;
                out[(2 * m + k, 2 * i)] = -wm.x;
                out[(2 * m + k, 2 * i + 1)] = -wm.y;
                out[(2 * m + k, 2 * m + k)] += r.m.dot(&wm);
            }
        }
        for &(a, b, v) in &self.omega_theta {
            out[(2 * m + a, 2 * m + b)] += v;
        }
        out
    }

    /// Explicit measurement covariance assembled from its definition blocks;
    /// quadratic-size oracle for the closed-form information matrix.
    pub fn r_gamma_dense(&self, sigma_theta: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.rows.len();
        let t = self.n_poses - 1;
        let dim = 2 * m + t;
        let big_m = self.m_dense();
        let mut out = DMatrix::zeros(dim, dim);
        out.view_mut((0, 0), (2 * m, 2 * m))
            .copy_from(&(self.world_cov_dense() + &big_m * sigma_theta * big_m.transpose()));
        out.view_mut((0, 2 * m), (2 * m, t))
            .copy_from(&(&big_m * sigma_theta));
        out.view_mut((2 * m, 0), (t, 2 * m))
            .copy_from(&(sigma_theta * big_m.transpose()));
        out.view_mut((2 * m, 2 * m), (t, t)).copy_from(sigma_theta);
        out
    }

    /// Dense normal matrix `A^T Omega_gamma A`; used for predicted-sigma
    /// consistency checks at small scale.
    pub fn normal_dense(&self) -> DMatrix<f64> {
        let a = self.a_dense();
        a.transpose() * self.omega_gamma_dense() * a
    }
}
