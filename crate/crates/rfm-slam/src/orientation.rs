//! Global heading estimation: chained initialization, on-manifold MLE over
//! all pose orientations via a trust-region method, and the heading
//! information matrix from the linear relative-orientation model.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::rotation::RotationEdge;

/// Pose-orientation graph: nodes are pose headings, edges are relative
/// orientation measurements.
#[derive(Debug, Clone)]
pub struct OrientationGraph {
    pub n_nodes: usize,
    pub edges: Vec<RotationEdge>,
}

/// Result of the orientation stage.
#[derive(Debug, Clone)]
pub struct HeadingEstimate {
    /// Estimated headings for all nodes, anchor gauge-fixed.
    pub theta: DVector<f64>,
    /// Information matrix over the non-anchor nodes.
    pub omega: DMatrix<f64>,
    /// Covariance over the non-anchor nodes.
    pub sigma: DMatrix<f64>,
    pub anchor: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub theta: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when accepted steps stopped decreasing the cost.
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions { max_iterations: 100, gradient_tol: 1e-8 }
    }
}

impl OrientationGraph {
    pub fn new(n_nodes: usize, edges: Vec<RotationEdge>) -> Result<Self> {
        for e in &edges {
            if e.from_pose == e.to_pose || e.from_pose >= n_nodes || e.to_pose >= n_nodes {
                return Err(Error::InvalidInput(format!(
                    "bad edge endpoints {} -> {}",
                    e.from_pose, e.to_pose
                )));
            }
            if !(e.var > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "edge {} -> {} has non-positive variance {}",
                    e.from_pose, e.to_pose, e.var
                )));
            }
        }
        Ok(OrientationGraph { n_nodes, edges })
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            adj[e.from_pose].push((e.to_pose, e.delta_theta));
            adj[e.to_pose].push((e.from_pose, -e.delta_theta));
        }
        adj
    }

    /// Nodes unreachable from node 0, empty when connected.
    pub fn unreachable_nodes(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0usize]);
        if self.n_nodes > 0 {
            seen[0] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        (0..self.n_nodes).filter(|&i| !seen[i]).collect()
    }
}

/// Initial headings by breadth-first chaining of edge measurements from
/// node 0.
pub fn chain_initial_guess(graph: &OrientationGraph, anchor_theta: f64) -> Result<DVector<f64>> {
    let unreachable = graph.unreachable_nodes();
    if !unreachable.is_empty() {
        return Err(Error::DisconnectedGraph { nodes: unreachable });
    }
    let adj = graph.adjacency();
    let mut theta = DVector::zeros(graph.n_nodes);
    let mut seen = vec![false; graph.n_nodes];
    let mut queue = VecDeque::from([0usize]);
    if graph.n_nodes > 0 {
        theta[0] = wrap_angle(anchor_theta);
        seen[0] = true;
    }
    while let Some(u) = queue.pop_front() {
        for &(v, delta) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                theta[v] = wrap_angle(theta[u] + delta);
                queue.push_back(v);
            }
        }
    }
    Ok(theta)
}

/// Negative weighted sum of relative-rotation DCM traces and its gradient
/// with respect to the heading angles. For SO(2) the per-edge trace reduces
/// to `2 cos(delta_hat - (theta_to - theta_from))`; weights are `1 / sigma`.
pub fn cost_and_gradient(graph: &OrientationGraph, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut cost = 0.0;
    let mut grad = DVector::zeros(graph.n_nodes);
    for e in &graph.edges {
        let kappa = 1.0 / e.var.sqrt();
        let r = e.delta_theta - (theta[e.to_pose] - theta[e.from_pose]);
        cost -= 2.0 * kappa * r.cos();
        let s = 2.0 * kappa * r.sin();
        grad[e.to_pose] -= s;
        grad[e.from_pose] += s;
    }
    (cost, grad)
}

/// Hessian-vector product of the cost; the Hessian is a signed weighted
/// graph Laplacian with per-edge weight `2 kappa cos(r)`.
fn hessian_product(graph: &OrientationGraph, theta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(graph.n_nodes);
    for e in &graph.edges {
        let kappa = 1.0 / e.var.sqrt();
        let r = e.delta_theta - (theta[e.to_pose] - theta[e.from_pose]);
        let w = 2.0 * kappa * r.cos();
        let diff = v[e.to_pose] - v[e.from_pose];
        out[e.to_pose] += w * diff;
        out[e.from_pose] -= w * diff;
    }
    out
}

/// Steihaug truncated conjugate gradient for the trust-region subproblem
/// `min g^T p + 0.5 p^T H p` subject to `|p| <= radius`.
fn steihaug(
    graph: &OrientationGraph,
    theta: &DVector<f64>,
    grad: &DVector<f64>,
    radius: f64,
) -> DVector<f64> {
    let n = grad.len();
    let mut p = DVector::zeros(n);
    let mut r = -grad.clone();
    let mut d = r.clone();
    let mut rr = r.dot(&r);
    let tol = (1e-10 * rr.sqrt()).max(1e-300);
    for _ in 0..(2 * n).max(10) {
        let hd = hessian_product(graph, theta, &d);
        let dhd = d.dot(&hd);
        if dhd <= 0.0 {
            return to_boundary(&p, &d, radius);
        }
        let alpha = rr / dhd;
        let p_next = &p + alpha * &d;
        if p_next.norm() >= radius {
            return to_boundary(&p, &d, radius);
        }
        p = p_next;
        r -= alpha * hd;
        let rr_next = r.dot(&r);
        if rr_next.sqrt() < tol {
            break;
        }
        d = &r + (rr_next / rr) * d;
        rr = rr_next;
    }
    p
}

/// Step from `p` along `d` to the trust-region boundary.
fn to_boundary(p: &DVector<f64>, d: &DVector<f64>, radius: f64) -> DVector<f64> {
    let pp = p.dot(p);
    let pd = p.dot(d);
    let dd = d.dot(d);
    let disc = (pd * pd + dd * (radius * radius - pp)).max(0.0);
    let tau = (-pd + disc.sqrt()) / dd;
    p + tau * d
}

/// Trust-region minimization of the heading cost over all node angles.
/// The gauge is fixed afterwards by shifting node 0 back to the anchor value.
pub fn optimize_orientations(
    graph: &OrientationGraph,
    theta0: &DVector<f64>,
    opts: &OptimizeOptions,
) -> OptimizeReport {
    let anchor_value = if theta0.is_empty() { 0.0 } else { theta0[0] };
    let mut theta = theta0.clone();
    let mut radius = 1.0;
    let max_radius = 100.0;
    let (mut cost, mut grad) = cost_and_gradient(graph, &theta);
    let mut converged = false;
    let mut iterations = 0;
    let mut stall_count = 0u32;
    let mut stalled = false;
    // The gradient scales with the total edge weight; an absolute tolerance
    // would be unreachable on large, tightly constrained graphs.
    let grad_scale: f64 =
        1.0 + graph.edges.iter().map(|e| 2.0 / e.var.sqrt()).sum::<f64>();
    let tol = opts.gradient_tol * grad_scale;

    for _ in 0..opts.max_iterations {
        if grad.norm() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = steihaug(graph, &theta, &grad, radius);
        let predicted = -(grad.dot(&step) + 0.5 * step.dot(&hessian_product(graph, &theta, &step)));
        if predicted <= 0.0 || step.norm() < 1e-15 {
            radius *= 0.25;
            if radius < 1e-14 {
                // Numerical floor: no step can improve the cost further.
                stalled = true;
                break;
            }
            continue;
        }
        let candidate = &theta + &step;
        let (cost_new, grad_new) = cost_and_gradient(graph, &candidate);
        let rho = (cost - cost_new) / predicted;
        if rho < 0.25 {
            radius *= 0.25;
        } else if rho > 0.75 && (step.norm() - radius).abs() < 1e-9 * radius {
            radius = (2.0 * radius).min(max_radius);
        }
        if rho > 1e-4 {
            if cost_new >= cost {
                stall_count += 1;
                if stall_count >= 10 {
                    stalled = true;
                }
            } else {
                stall_count = 0;
            }
            theta = candidate;
            cost = cost_new;
            grad = grad_new;
        }
        if radius < 1e-14 {
            stalled = true;
            break;
        }
    }
    if !converged && grad.norm() < tol {
        converged = true;
    }

    // Gauge fix: pin node 0 to the anchor heading and wrap.
    if !theta.is_empty() {
        let shift = theta[0] - anchor_value;
        for v in theta.iter_mut() {
            *v = wrap_angle(*v - shift);
        }
    }
    OptimizeReport { theta, cost, iterations, converged, stalled }
}

/// Heading information matrix `H^T R^-1 H` with the anchor column removed,
/// and its inverse by factorization.
pub fn orientation_information(
    graph: &OrientationGraph,
    anchor: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let unreachable = graph.unreachable_nodes();
    if !unreachable.is_empty() {
        return Err(Error::DisconnectedGraph { nodes: unreachable });
    }
    let n = graph.n_nodes;
    let reduced = |i: usize| if i < anchor { Some(i) } else if i > anchor { Some(i - 1) } else { None };
    let mut omega = DMatrix::zeros(n - 1, n - 1);
    for e in &graph.edges {
        let w = 1.0 / e.var;
        let a = reduced(e.from_pose);
        let b = reduced(e.to_pose);
        if let Some(a) = a {
            omega[(a, a)] += w;
        }
        if let Some(b) = b {
            omega[(b, b)] += w;
        }
        if let (Some(a), Some(b)) = (a, b) {
            omega[(a, b)] -= w;
            omega[(b, a)] -= w;
        }
    }
    let chol = omega.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient("heading information matrix is singular after anchoring".into())
    })?;
    let sigma = chol.inverse();
    Ok((omega, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::EdgeKind;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn edge(from: usize, to: usize, delta: f64, var: f64) -> RotationEdge {
        RotationEdge { from_pose: from, to_pose: to, delta_theta: delta, var, kind: EdgeKind::OdometryFused }
    }

    fn chain_graph(deltas: &[f64], var: f64) -> OrientationGraph {
        let edges = deltas
            .iter()
            .enumerate()
            .map(|(k, &d)| edge(k, k + 1, d, var))
            .collect();
        OrientationGraph::new(deltas.len() + 1, edges).unwrap()
    }

    fn random_graph(n: usize, seed: u64) -> (OrientationGraph, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = DVector::from_fn(n, |_, _| rng.random_range(-PI..PI));
        let mut edges = Vec::new();
        for k in 0..n - 1 {
            edges.push(edge(k, k + 1, wrap_angle(truth[k + 1] - truth[k]), rng.random_range(0.001..0.01)));
        }
        for _ in 0..n {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push(edge(a, b, wrap_angle(truth[b] - truth[a]), rng.random_range(0.001..0.01)));
            }
        }
        (OrientationGraph::new(n, edges).unwrap(), truth)
    }

    #[test]
    fn chain_initial_guess_examples() {
        let g = chain_graph(&[PI / 2.0, PI / 2.0], 0.01);
        let theta = chain_initial_guess(&g, 0.0).unwrap();
        assert_relative_eq!(theta[0], 0.0);
        assert_relative_eq!(theta[1], PI / 2.0);
        assert_relative_eq!(theta[2], PI);

        let g = OrientationGraph::new(1, vec![]).unwrap();
        let theta = chain_initial_guess(&g, 0.3).unwrap();
        assert_relative_eq!(theta[0], 0.3);

        // Wrap across the branch cut.
        let g = chain_graph(&[PI, PI], 0.01);
        let theta = chain_initial_guess(&g, 0.0).unwrap();
        assert_relative_eq!(theta[1], PI);
        assert_relative_eq!(theta[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn disconnected_graph_names_unreachable_nodes() {
        let g = OrientationGraph::new(4, vec![edge(0, 1, 0.1, 0.01)]).unwrap();
        match chain_initial_guess(&g, 0.0) {
            Err(Error::DisconnectedGraph { nodes }) => assert_eq!(nodes, vec![2, 3]),
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn cost_at_ground_truth() {
        let (g, truth) = random_graph(8, 41);
        let (cost, grad) = cost_and_gradient(&g, &truth);
        let kappa_sum: f64 = g.edges.iter().map(|e| 1.0 / e.var.sqrt()).sum();
        assert_relative_eq!(cost, -2.0 * kappa_sum, epsilon = 1e-9 * kappa_sum);
        assert!(grad.norm() < 1e-9, "gradient at stationary point: {}", grad.norm());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, _) = random_graph(10, 77);
        let theta = DVector::from_fn(10, |_, _| rng.random_range(-PI..PI));
        let (_, grad) = cost_and_gradient(&g, &theta);
        let h = 1e-6;
        for i in 0..10 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (cost_and_gradient(&g, &tp).0 - cost_and_gradient(&g, &tm).0) / (2.0 * h);
            let denom = grad[i].abs().max(1.0);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-6,
                "component {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn gauge_invariance_of_cost() {
        let (g, truth) = random_graph(12, 3);
        let shifted = truth.add_scalar(1.234);
        let (a, _) = cost_and_gradient(&g, &truth);
        let (b, _) = cost_and_gradient(&g, &shifted);
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn consistent_cycle_recovers_exactly() {
        let edges = vec![
            edge(0, 1, PI / 3.0, 0.01),
            edge(1, 2, PI / 3.0, 0.01),
            edge(0, 2, 2.0 * PI / 3.0, 0.01),
        ];
        let g = OrientationGraph::new(3, edges).unwrap();
        let theta0 = chain_initial_guess(&g, 0.0).unwrap();
        let out = optimize_orientations(&g, &theta0, &OptimizeOptions::default());
        assert!(out.converged);
        assert_relative_eq!(out.theta[0], 0.0);
        assert_relative_eq!(out.theta[1], PI / 3.0, epsilon = 1e-8);
        assert_relative_eq!(out.theta[2], 2.0 * PI / 3.0, epsilon = 1e-8);

        // All edge residuals vanish on the noise-free graph.
        for e in &g.edges {
            let r = wrap_angle(e.delta_theta - (out.theta[e.to_pose] - out.theta[e.from_pose]));
            assert!(r.abs() < 1e-8);
        }
    }

    #[test]
    fn perturbed_cycle_matches_grid_oracle() {
        let edges = vec![
            edge(0, 1, PI / 3.0 + 0.1, 0.01),
            edge(1, 2, PI / 3.0, 0.01),
            edge(0, 2, 2.0 * PI / 3.0, 0.01),
        ];
        let g = OrientationGraph::new(3, edges).unwrap();
        let theta0 = chain_initial_guess(&g, 0.0).unwrap();
        let out = optimize_orientations(&g, &theta0, &OptimizeOptions::default());

        // 2-D brute force over (theta_1, theta_2) with theta_0 = 0.
        let step = 1e-3;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let center = (out.theta[1], out.theta[2]);
        let mut t1 = center.0 - 0.5;
        while t1 < center.0 + 0.5 {
            let mut t2 = center.1 - 0.5;
            while t2 < center.1 + 0.5 {
                let theta = DVector::from_vec(vec![0.0, t1, t2]);
                let (c, _) = cost_and_gradient(&g, &theta);
                if c < best.0 {
                    best = (c, t1, t2);
                }
                t2 += step;
            }
            t1 += step;
        }
        assert!((out.theta[1] - best.1).abs() < 2e-3, "{} vs {}", out.theta[1], best.1);
        assert!((out.theta[2] - best.2).abs() < 2e-3, "{} vs {}", out.theta[2], best.2);
    }

    #[test]
    fn optimizer_insensitive_to_perturbed_init() {
        let (g, truth) = random_graph(10, 55);
        let opts = OptimizeOptions::default();
        let base = optimize_orientations(&g, &truth, &opts);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Keep node 0 fixed; it defines the gauge anchor.
        let perturbed: DVector<f64> = DVector::from_fn(10, |i, _| {
            if i == 0 { truth[0] } else { truth[i] + rng.random_range(-0.5..0.5) }
        });
        let other = optimize_orientations(&g, &perturbed, &opts);
        for i in 0..10 {
            assert!(
                wrap_angle(base.theta[i] - other.theta[i]).abs() < 1e-6,
                "node {i}: {} vs {}",
                base.theta[i],
                other.theta[i]
            );
        }
    }

    #[test]
    fn optimized_cost_not_above_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (g, truth) = random_graph(15, 91);
        let noisy_init =
            DVector::from_fn(15, |i, _| truth[i] + rng.random_range(-0.4..0.4));
        let (init_cost, _) = cost_and_gradient(&g, &noisy_init);
        let out = optimize_orientations(&g, &noisy_init, &OptimizeOptions::default());
        assert!(out.cost <= init_cost + 1e-12);
    }

    #[test]
    fn information_hand_computed() {
        let g = chain_graph(&[0.1, 0.2], 1.0);
        let (omega, _) = orientation_information(&g, 0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        assert_relative_eq!(omega, expect, epsilon = 1e-12);

        let g = chain_graph(&[0.5], 0.04);
        let (omega, _) = orientation_information(&g, 0).unwrap();
        assert_relative_eq!(omega[(0, 0)], 25.0, epsilon = 1e-12);
    }

    #[test]
    fn omega_times_sigma_is_identity() {
        let (g, _) = random_graph(20, 13);
        let (omega, sigma) = orientation_information(&g, 0).unwrap();
        let prod = &omega * &sigma;
        assert!((prod - DMatrix::identity(19, 19)).norm() < 1e-8);
    }

    // Empirical covariance of the MLE against the linear-model covariance.
    #[test]
    fn monte_carlo_heading_consistency() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let truth = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let var: f64 = 0.004;
        let mut skeleton = Vec::new();
        for k in 0..n - 1 {
            skeleton.push((k, k + 1));
        }
        skeleton.extend([(0, 5), (2, 8), (4, 9), (1, 7)]);

        let graph_for = |rng: &mut ChaCha8Rng| {
            let edges = skeleton
                .iter()
                .map(|&(a, b)| {
                    let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * var.sqrt();
                    edge(a, b, wrap_angle(truth[b] - truth[a] + noise), var)
                })
                .collect();
            OrientationGraph::new(n, edges).unwrap()
        };

        let reps = 300;
        let mut sq_sum = vec![0.0f64; n - 1];
        let mut sigma_trace = 0.0;
        for _ in 0..reps {
            let g = graph_for(&mut rng);
            let theta0 = chain_initial_guess(&g, truth[0]).unwrap();
            let out = optimize_orientations(&g, &theta0, &OptimizeOptions::default());
            for i in 1..n {
                let err = wrap_angle(out.theta[i] - truth[i] - (out.theta[0] - truth[0]));
                sq_sum[i - 1] += err * err;
            }
            if sigma_trace == 0.0 {
                let (_, sigma) = orientation_information(&g, 0).unwrap();
                sigma_trace = sigma.trace();
            }
        }
        let empirical_trace: f64 = sq_sum.iter().map(|s| s / reps as f64).sum();
        let ratio = empirical_trace / sigma_trace;
        assert!(
            ratio < 1.5 && ratio > 1.0 / 1.5,
            "trace ratio {ratio} (empirical {empirical_trace}, predicted {sigma_trace})"
        );
    }
}
