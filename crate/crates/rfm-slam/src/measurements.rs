//! Conversion of raw range-bearing observations into robot-to-feature
//! positions and correlated feature-to-feature displacements, with
//! first-order covariances.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};

/// A single range-bearing observation in the robot frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeBearing {
    pub pose_id: usize,
    pub landmark_id: usize,
    /// Range in meters, > 0.
    pub range: f64,
    /// Bearing in radians, robot frame, wrapped to (-pi, pi].
    pub bearing: f64,
    pub sigma_r2: f64,
    pub sigma_b2: f64,
}

/// Position of a feature relative to the robot, in the robot frame.
#[derive(Debug, Clone, Copy)]
pub struct LocalFeaturePosition {
    pub pose_id: usize,
    pub landmark_id: usize,
    pub delta: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

/// All feature-to-feature displacements at one pose, stacked, with the full
/// (correlated) covariance. Pairs are ordered by `(landmark_i, landmark_j)`
/// with `i < j` so sets from two poses align by key.
#[derive(Debug, Clone)]
pub struct LocalDisplacementSet {
    pub pose_id: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Stacked `2 * pairs.len()` vector; block `k` is `delta_j - delta_i`.
    pub d: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LocalDisplacementSet {
    pub fn displacement(&self, k: usize) -> Vector2<f64> {
        Vector2::new(self.d[2 * k], self.d[2 * k + 1])
    }
}

/// Invert a range-bearing observation into a robot-frame feature position
/// with a first-order covariance.
pub fn invert_range_bearing(z: &RangeBearing) -> LocalFeaturePosition {
    let (s, c) = z.bearing.sin_cos();
    let delta = Vector2::new(z.range * c, z.range * s);
    let jac = Matrix2::new(c, -z.range * s, s, z.range * c);
    let noise = Matrix2::new(z.sigma_r2, 0.0, 0.0, z.sigma_b2);
    LocalFeaturePosition {
        pose_id: z.pose_id,
        landmark_id: z.landmark_id,
        delta,
        cov: jac * noise * jac.transpose(),
    }
}

/// Build the stacked displacement set for all landmark pairs visible at one
/// pose. Fewer than two observations yield an empty set.
pub fn pairwise_relative_displacements(obs: &[RangeBearing]) -> Result<LocalDisplacementSet> {
    let pose_id = obs.first().map(|z| z.pose_id).unwrap_or(0);
    for z in obs {
        if z.pose_id != pose_id {
            return Err(Error::InvalidInput(format!(
                "observations span poses {} and {}",
                pose_id, z.pose_id
            )));
        }
    }
    let mut locals: Vec<LocalFeaturePosition> = obs.iter().map(invert_range_bearing).collect();
    locals.sort_by_key(|f| f.landmark_id);
    for w in locals.windows(2) {
        if w[0].landmark_id == w[1].landmark_id {
            return Err(Error::InvalidInput(format!(
                "duplicate landmark {} at pose {}",
                w[0].landmark_id, pose_id
            )));
        }
    }

    let n = locals.len();
    if n < 2 {
        return Ok(LocalDisplacementSet {
            pose_id,
            pairs: Vec::new(),
            d: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        });
    }

    let n_pairs = n * (n - 1) / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut d = DVector::zeros(2 * n_pairs);
    // Selection matrix mapping stacked per-landmark deltas to pair
    // differences; the pair covariance is S * blkdiag(cov_i) * S^T.
    let mut sel = DMatrix::zeros(2 * n_pairs, 2 * n);
    for (k, (a, b)) in pair_indices(n).enumerate() {
        pairs.push((locals[a].landmark_id, locals[b].landmark_id));
        let diff = locals[b].delta - locals[a].delta;
        d[2 * k] = diff.x;
        d[2 * k + 1] = diff.y;
        for r in 0..2 {
            sel[(2 * k + r, 2 * a + r)] = -1.0;
            sel[(2 * k + r, 2 * b + r)] = 1.0;
        }
    }
    let mut blk = DMatrix::zeros(2 * n, 2 * n);
    for (i, f) in locals.iter().enumerate() {
        blk.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&f.cov);
    }
    let cov = &sel * blk * sel.transpose();
    Ok(LocalDisplacementSet { pose_id, pairs, d, cov })
}

/// Lexicographic (i, j) index pairs with i < j.
fn pair_indices(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn rb(pose: usize, lm: usize, r: f64, b: f64) -> RangeBearing {
        RangeBearing {
            pose_id: pose,
            landmark_id: lm,
            range: r,
            bearing: b,
            sigma_r2: 0.01,
            sigma_b2: 0.04,
        }
    }

    #[test]
    fn inversion_basic() {
        let f = invert_range_bearing(&rb(0, 0, 2.0, 0.0));
        assert_relative_eq!(f.delta, Vector2::new(2.0, 0.0));
        let f = invert_range_bearing(&rb(0, 0, 1.0, PI / 2.0));
        assert_relative_eq!(f.delta, Vector2::new(0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn inversion_cov_at_zero_bearing() {
        let f = invert_range_bearing(&rb(0, 0, 1.0, 0.0));
        assert_relative_eq!(f.cov, Matrix2::new(0.01, 0.0, 0.0, 0.04), epsilon = 1e-15);
    }

    // Monte-Carlo check of the linearized inversion covariance.
    #[test]
    fn inversion_cov_matches_monte_carlo() {
        let z = rb(0, 0, 1.0, 0.3);
        let truth = invert_range_bearing(&z);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut mean = Vector2::zeros();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let nr: f64 = rng.sample(StandardNormal);
            let nb: f64 = rng.sample(StandardNormal);
            let noisy = RangeBearing {
                range: z.range + nr * z.sigma_r2.sqrt(),
                bearing: z.bearing + nb * z.sigma_b2.sqrt(),
                ..z
            };
            let d = invert_range_bearing(&noisy).delta;
            mean += d;
            samples.push(d);
        }
        mean /= n as f64;
        let mut cov = Matrix2::zeros();
        for s in &samples {
            let e = s - mean;
            cov += e * e.transpose();
        }
        cov /= (n - 1) as f64;
        let rel = (cov - truth.cov).norm() / truth.cov.norm();
        assert!(rel < 0.05, "MC covariance rel error {rel}");
    }

    #[test]
    fn pair_count_and_values() {
        let obs = vec![rb(3, 0, 1.0, 0.0), rb(3, 1, 2.0, PI / 2.0), rb(3, 2, 1.5, -0.4)];
        let set = pairwise_relative_displacements(&obs).unwrap();
        assert_eq!(set.pairs.len(), 3);
        assert_eq!(set.pairs, vec![(0, 1), (0, 2), (1, 2)]);
        // d_01 = delta_1 - delta_0
        assert_relative_eq!(set.displacement(0), Vector2::new(-1.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn fewer_than_two_is_empty() {
        let set = pairwise_relative_displacements(&[rb(0, 5, 1.0, 0.0)]).unwrap();
        assert!(set.pairs.is_empty());
        let set = pairwise_relative_displacements(&[]).unwrap();
        assert!(set.pairs.is_empty());
    }

    #[test]
    fn duplicate_landmark_is_rejected() {
        let obs = vec![rb(0, 1, 1.0, 0.0), rb(0, 1, 2.0, 0.1)];
        assert!(pairwise_relative_displacements(&obs).is_err());
    }

    #[test]
    fn diagonal_blocks_sum_endpoint_covs() {
        let obs = vec![rb(0, 0, 1.0, 0.2), rb(0, 1, 2.0, -0.7), rb(0, 2, 0.8, 1.1)];
        let locals: Vec<_> = obs.iter().map(invert_range_bearing).collect();
        let set = pairwise_relative_displacements(&obs).unwrap();
        for (k, &(i, j)) in set.pairs.iter().enumerate() {
            let expect = locals[i].cov + locals[j].cov;
            let block: Matrix2<f64> = set.cov.fixed_view::<2, 2>(2 * k, 2 * k).into_owned();
            assert_relative_eq!(block, expect, epsilon = 1e-12);
        }
        // Pairs sharing landmark 0 are correlated.
        let off = set.cov.view((0, 2), (2, 2)).clone_owned();
        assert!(off.norm() > 1e-6);
    }

    #[test]
    fn set_cov_matches_monte_carlo() {
        let obs = vec![rb(0, 0, 1.0, 0.2), rb(0, 1, 2.0, -0.7), rb(0, 2, 0.8, 1.1)];
        let set = pairwise_relative_displacements(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let dim = set.d.len();
        let mut mean = DVector::zeros(dim);
        let mut acc = DMatrix::zeros(dim, dim);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let noisy: Vec<_> = obs
                .iter()
                .map(|z| {
                    let nr: f64 = rng.sample(StandardNormal);
                    let nb: f64 = rng.sample(StandardNormal);
                    RangeBearing {
                        range: z.range + nr * z.sigma_r2.sqrt(),
                        bearing: z.bearing + nb * z.sigma_b2.sqrt(),
                        ..*z
                    }
                })
                .collect();
            let s = pairwise_relative_displacements(&noisy).unwrap();
            mean += &s.d;
            samples.push(s.d);
        }
        mean /= n as f64;
        for s in &samples {
            let e = s - &mean;
            acc += &e * e.transpose();
        }
        acc /= (n - 1) as f64;
        let rel = (&acc - &set.cov).norm() / set.cov.norm();
        assert!(rel < 0.05, "MC set covariance rel error {rel}");
    }

    // Displacements depend on robot heading only, never position.
    #[test]
    fn frame_invariance_under_translation() {
        let lms = [Vector2::new(3.0, 1.0), Vector2::new(-1.0, 2.0)];
        let observe = |px: f64, py: f64, theta: f64| {
            let rot = crate::geometry::dcm_from_angle(theta).unwrap();
            lms.iter()
                .enumerate()
                .map(|(i, l)| {
                    let local = rot.transposed().rotate(&(l - Vector2::new(px, py)));
                    RangeBearing {
                        pose_id: 0,
                        landmark_id: i,
                        range: local.norm(),
                        bearing: local.y.atan2(local.x),
                        sigma_r2: 1e-4,
                        sigma_b2: 1e-4,
                    }
                })
                .collect::<Vec<_>>()
        };
        let a = pairwise_relative_displacements(&observe(0.0, 0.0, 0.4)).unwrap();
        let b = pairwise_relative_displacements(&observe(5.0, -2.0, 0.4)).unwrap();
        assert_relative_eq!(a.d, b.d, epsilon = 1e-12);

        // A heading change rotates the displacement by exactly the relative rotation.
        let c = pairwise_relative_displacements(&observe(5.0, -2.0, 1.1)).unwrap();
        let rel = crate::geometry::dcm_from_angle(0.4 - 1.1).unwrap();
        assert_relative_eq!(c.displacement(0), rel.rotate(&a.displacement(0)), epsilon = 1e-12);
    }
}
