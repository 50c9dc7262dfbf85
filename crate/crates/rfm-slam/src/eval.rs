//! Evaluation: RMSE metrics, catastrophic-failure classification, a
//! full-SLAM Gauss-Newton baseline with Levenberg-Marquardt damping, and
//! noise-sweep aggregation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DVector, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{dcm_derivative, dcm_from_angle, wrap_angle, Pose2};
use crate::pipeline::{solve_dataset, PipelineConfig, SolvedMap};
use crate::sim::{generate_map, simulate_run, Dataset, NoiseSpec, WorldSpec};
use crate::sparse::TripletMatrix;

/// How estimate and truth are brought into a common frame before RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    /// Rigidly move the estimate so its first pose coincides with the truth.
    Anchor,
}

/// Fraction of the trajectory length above which a run counts as a
/// catastrophic failure.
pub const CATASTROPHIC_FRACTION: f64 = 0.10;

pub fn classify_catastrophic(rmse_position: f64, trajectory_length: f64) -> bool {
    rmse_position > CATASTROPHIC_FRACTION * trajectory_length
}

fn align(est: &[Pose2], gt: &[Pose2], alignment: Alignment) -> Vec<Pose2> {
    match alignment {
        Alignment::None => est.to_vec(),
        Alignment::Anchor => {
            let dtheta = wrap_angle(gt[0].theta - est[0].theta);
            let rot = dcm_from_angle(dtheta).expect("finite alignment angle");
            let p0 = est[0].position();
            let q0 = gt[0].position();
            est.iter()
                .map(|p| {
                    let moved = rot.rotate(&(p.position() - p0)) + q0;
                    Pose2::new(moved.x, moved.y, wrap_angle(p.theta + dtheta))
                })
                .collect()
        }
    }
}

pub fn rmse_position(est: &[Pose2], gt: &[Pose2], alignment: Alignment) -> Result<f64> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    let est = align(est, gt, alignment);
    let se: f64 = est
        .iter()
        .zip(gt)
        .map(|(a, b)| (a.position() - b.position()).norm_squared())
        .sum();
    Ok((se / gt.len() as f64).sqrt())
}

pub fn rmse_heading(est: &[Pose2], gt: &[Pose2], alignment: Alignment) -> Result<f64> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::InvalidArgument("trajectory lengths differ".into()));
    }
    let est = align(est, gt, alignment);
    let se: f64 = est
        .iter()
        .zip(gt)
        .map(|(a, b)| wrap_angle(a.theta - b.theta).powi(2))
        .sum();
    Ok((se / gt.len() as f64).sqrt())
}

/// Per-run evaluation against ground truth.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rmse_position: f64,
    pub rmse_heading: f64,
    pub trajectory_length: f64,
    pub catastrophic: bool,
}

pub fn evaluate(map: &SolvedMap, ds: &Dataset) -> Result<EvalReport> {
    let rmse_p = rmse_position(&map.poses, &ds.poses_gt, Alignment::Anchor)?;
    let rmse_t = rmse_heading(&map.poses, &ds.poses_gt, Alignment::Anchor)?;
    let length = crate::sim::trajectory_length(&ds.poses_gt);
    Ok(EvalReport {
        rmse_position: rmse_p,
        rmse_heading: rmse_t,
        trajectory_length: length,
        catastrophic: classify_catastrophic(rmse_p, length),
    })
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "rmse_position_m,rmse_heading_rad,trajectory_length_m,catastrophic\n{},{},{},{}\n",
            self.rmse_position, self.rmse_heading, self.trajectory_length, self.catastrophic
        )
    }
}

/// Result of one full-SLAM baseline solve.
#[derive(Debug, Clone)]
pub struct GnReport {
    pub estimate: SolvedMap,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
}

/// Joint nonlinear least squares over all poses and observed landmarks,
/// Gauss-Newton with Levenberg-Marquardt damping, initialized from the
/// odometry chain. Pose 0 is fixed at the ground-truth anchor.
pub fn gauss_newton_baseline(ds: &Dataset) -> Result<GnReport> {
    ds.validate()?;
    let n = ds.n_poses();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two poses".into()));
    }

    let mut observed: Vec<usize> = ds.observations.iter().map(|z| z.landmark_id).collect();
    observed.sort_unstable();
    observed.dedup();
    let dense: HashMap<usize, usize> =
        observed.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let l = observed.len();

    // Unknown layout: poses 1..n as (x, y, theta), then landmarks as (x, y).
    let dim = 3 * (n - 1) + 2 * l;
    let pose_col = |k: usize| k.checked_sub(1).map(|i| 3 * i);
    let lm_col = |j: usize| 3 * (n - 1) + 2 * j;

    // Initial guess: dead reckoning, landmarks from their first observation.
    let chain = crate::sim::baseline_odometry_trajectory(ds);
    let mut x = DVector::zeros(dim);
    for k in 1..n {
        let c = pose_col(k).unwrap();
        x[c] = chain[k].x;
        x[c + 1] = chain[k].y;
        x[c + 2] = chain[k].theta;
    }
    let mut lm_init = vec![false; l];
    for z in &ds.observations {
        let j = dense[&z.landmark_id];
        if lm_init[j] {
            continue;
        }
        lm_init[j] = true;
        let p = chain[z.pose_id];
        let world = p.position()
            + dcm_from_angle(p.theta)?
                .rotate(&(z.range * Vector2::new(z.bearing.cos(), z.bearing.sin())));
        let c = lm_col(j);
        x[c] = world.x;
        x[c + 1] = world.y;
    }

    let anchor = ds.poses_gt[0];
    let pose_at = |x: &DVector<f64>, k: usize| -> Pose2 {
        match pose_col(k) {
            None => anchor,
            Some(c) => Pose2::new(x[c], x[c + 1], x[c + 2]),
        }
    };

    let cost_of = |x: &DVector<f64>| -> f64 {
        let mut cost = 0.0;
        for o in &ds.odometry {
            let a = pose_at(x, o.from_pose);
            let b = pose_at(x, o.to_pose);
            let rot = dcm_from_angle(a.theta).expect("finite heading");
            let et = rot.transposed().rotate(&(b.position() - a.position()))
                - Vector2::new(o.dx, o.dy);
            let ea = wrap_angle(b.theta - a.theta - o.dtheta);
            cost += et.x * et.x / o.var_x + et.y * et.y / o.var_y + ea * ea / o.var_t;
        }
        for z in &ds.observations {
            let p = pose_at(x, z.pose_id);
            let c = lm_col(dense[&z.landmark_id]);
            let d = Vector2::new(x[c], x[c + 1]) - p.position();
            let range = d.norm().max(1e-9);
            let er = range - z.range;
            let eb = wrap_angle(d.y.atan2(d.x) - p.theta - z.bearing);
            cost += er * er / z.sigma_r2 + eb * eb / z.sigma_b2;
        }
        cost
    };

    // Assemble the damped normal equations J^T W J + lambda I and the
    // gradient J^T W r at the current iterate.
    let build = |x: &DVector<f64>, lambda: f64| -> (TripletMatrix, DVector<f64>) {
        let mut h = TripletMatrix::new(dim);
        let mut g = DVector::zeros(dim);
        let add_block =
            |cols: &[(Option<usize>, Vec<f64>)], w: f64, r: f64, h: &mut TripletMatrix, g: &mut DVector<f64>| {
                // cols: starting column and the Jacobian entries of one
                // scalar residual for that variable block.
                for (ca, ja) in cols {
                    let Some(ca) = ca else { continue };
                    for (ia, &va) in ja.iter().enumerate() {
                        g[ca + ia] += w * va * r;
                        for (cb, jb) in cols {
                            let Some(cb) = cb else { continue };
                            for (ib, &vb) in jb.iter().enumerate() {
                                h.add(ca + ia, cb + ib, w * va * vb);
                            }
                        }
                    }
                }
            };

        for o in &ds.odometry {
            let a = pose_at(x, o.from_pose);
            let b = pose_at(x, o.to_pose);
            let rot = dcm_from_angle(a.theta).expect("finite heading");
            let dp = b.position() - a.position();
            let et = rot.transposed().rotate(&dp) - Vector2::new(o.dx, o.dy);
            let dtheta_col = dcm_derivative(a.theta).transpose() * dp;
            let rt = rot.transposed().matrix().clone_owned();
            let ca = pose_col(o.from_pose);
            let cb = pose_col(o.to_pose);
            for i in 0..2 {
                let w = 1.0 / if i == 0 { o.var_x } else { o.var_y };
                let cols = vec![
                    (ca, vec![-rt[(i, 0)], -rt[(i, 1)], dtheta_col[i]]),
                    (cb, vec![rt[(i, 0)], rt[(i, 1)], 0.0]),
                ];
                add_block(&cols, w, et[i], &mut h, &mut g);
            }
            let ea = wrap_angle(b.theta - a.theta - o.dtheta);
            let cols = vec![(ca, vec![0.0, 0.0, -1.0]), (cb, vec![0.0, 0.0, 1.0])];
            add_block(&cols, 1.0 / o.var_t, ea, &mut h, &mut g);
        }

        for z in &ds.observations {
            let p = pose_at(x, z.pose_id);
            let cl = lm_col(dense[&z.landmark_id]);
            let d = Vector2::new(x[cl], x[cl + 1]) - p.position();
            let range = d.norm().max(1e-9);
            let er = range - z.range;
            let eb = wrap_angle(d.y.atan2(d.x) - p.theta - z.bearing);
            let cp = pose_col(z.pose_id);
            let dr_dl = d / range;
            let cols_r = vec![
                (cp, vec![-dr_dl.x, -dr_dl.y, 0.0]),
                (Some(cl), vec![dr_dl.x, dr_dl.y]),
            ];
            add_block(&cols_r, 1.0 / z.sigma_r2, er, &mut h, &mut g);
            let db_dl = Vector2::new(-d.y, d.x) / (range * range);
            let cols_b = vec![
                (cp, vec![-db_dl.x, -db_dl.y, -1.0]),
                (Some(cl), vec![db_dl.x, db_dl.y]),
            ];
            add_block(&cols_b, 1.0 / z.sigma_b2, eb, &mut h, &mut g);
        }

        for i in 0..dim {
            h.add(i, i, lambda);
        }
        (h, g)
    };

    let mut lambda = 1e-4;
    let mut cost = cost_of(&x);
    let mut converged = false;
    let mut iterations = 0;
    let max_iterations = 100;

    while iterations < max_iterations {
        iterations += 1;
        let (h, g) = build(&x, lambda);
        let step = match h.solve_spd(&(-&g)) {
            Ok(s) => s,
            Err(_) => {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            }
        };
        let candidate = &x + &step;
        let cost_new = cost_of(&candidate);
        if cost_new.is_finite() && cost_new < cost {
            let rel = (cost - cost_new) / cost.max(1e-300);
            x = candidate;
            cost = cost_new;
            lambda = (lambda / 3.0).max(1e-12);
            if rel < 1e-10 || step.norm() < 1e-10 {
                converged = true;
                break;
            }
        } else {
            lambda *= 3.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        poses.push(pose_at(&x, k));
    }
    let landmarks = observed
        .iter()
        .map(|&id| {
            let c = lm_col(dense[&id]);
            (id, Vector2::new(x[c], x[c + 1]))
        })
        .collect();
    Ok(GnReport {
        estimate: SolvedMap { poses, landmarks },
        converged,
        iterations,
        final_cost: cost,
    })
}

/// Outcome of one (solver, dataset) run in a sweep.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub rmse: Option<f64>,
    pub converged: bool,
    pub catastrophic: bool,
}

/// One sweep cell: all runs at a fixed (map, solver, alpha, beta).
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub map: String,
    pub solver: String,
    pub alpha: f64,
    pub beta: f64,
    pub outcomes: Vec<RunOutcome>,
}

impl SweepCell {
    /// Mean RMSE over converged runs, mirroring the convention of excluding
    /// non-converged runs from the average.
    pub fn mean_rmse(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .outcomes
            .iter()
            .filter(|o| o.converged)
            .filter_map(|o| o.rmse)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Standard error of the per-run RMSE over converged runs.
    pub fn rmse_standard_error(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .outcomes
            .iter()
            .filter(|o| o.converged)
            .filter_map(|o| o.rmse)
            .collect();
        if vals.len() < 2 {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        Some((var / vals.len() as f64).sqrt())
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.catastrophic).count()
    }

    pub fn non_converged(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.converged).count()
    }
}

/// Run the separated pipeline on one dataset; a rank-deficient position
/// system is retried with odometry translation rows before giving up.
pub fn run_rfm(ds: &Dataset) -> RunOutcome {
    let base = PipelineConfig::default();
    let result = solve_dataset(ds, &base).or_else(|e| match e {
        Error::RankDeficient(_) => solve_dataset(
            ds,
            &PipelineConfig { odo_translation_rows: true, ..PipelineConfig::default() },
        ),
        other => Err(other),
    });
    match result {
        Ok((map, _)) => match evaluate(&map, ds) {
            Ok(r) => RunOutcome {
                seed: ds.seed,
                rmse: Some(r.rmse_position),
                converged: true,
                catastrophic: r.catastrophic,
            },
            Err(_) => RunOutcome { seed: ds.seed, rmse: None, converged: false, catastrophic: true },
        },
        Err(_) => RunOutcome { seed: ds.seed, rmse: None, converged: false, catastrophic: true },
    }
}

pub fn run_gn(ds: &Dataset) -> RunOutcome {
    match gauss_newton_baseline(ds) {
        Ok(report) => match evaluate(&report.estimate, ds) {
            Ok(r) => RunOutcome {
                seed: ds.seed,
                rmse: Some(r.rmse_position),
                converged: report.converged,
                catastrophic: r.catastrophic,
            },
            Err(_) => RunOutcome { seed: ds.seed, rmse: None, converged: false, catastrophic: true },
        },
        Err(_) => RunOutcome { seed: ds.seed, rmse: None, converged: false, catastrophic: true },
    }
}

fn dataset_for(template: &WorldSpec, seed: u64, alpha: f64, beta: f64) -> Result<Dataset> {
    let mut spec = template.clone();
    spec.seed = seed;
    let lms = generate_map(&spec)?;
    simulate_run(&lms, &spec, &NoiseSpec::scaled(alpha, beta))
}

/// Run a solver sweep over noise levels and seeds. Runs execute in parallel
/// across worker threads; each run is internally single threaded, so results
/// depend only on the seeds.
pub fn sweep(
    map_name: &str,
    template: &WorldSpec,
    solvers: &[&str],
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    for s in solvers {
        if !matches!(*s, "rfm" | "gn") {
            return Err(Error::InvalidArgument(format!("unknown solver '{s}'")));
        }
    }
    let mut jobs = Vec::new();
    for &solver in solvers {
        for &alpha in alphas {
            for &beta in betas {
                for &seed in seeds {
                    jobs.push((solver, alpha, beta, seed));
                }
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, RunOutcome)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let worker_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (solver, alpha, beta, seed) = jobs[i];
                match dataset_for(template, seed, alpha, beta) {
                    Ok(ds) => {
                        let outcome = if solver == "rfm" { run_rfm(&ds) } else { run_gn(&ds) };
                        results.lock().unwrap().push((i, outcome));
                    }
                    Err(e) => {
                        *worker_error.lock().unwrap() = Some(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = worker_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut by_job: Vec<Option<RunOutcome>> = vec![None; jobs.len()];
    for (i, outcome) in results.into_inner().unwrap() {
        by_job[i] = Some(outcome);
    }

    let mut cells = Vec::new();
    let mut idx = 0;
    for &solver in solvers {
        for &alpha in alphas {
            for &beta in betas {
                let outcomes: Vec<RunOutcome> = seeds
                    .iter()
                    .map(|_| {
                        let o = by_job[idx].clone().expect("every job ran");
                        idx += 1;
                        o
                    })
                    .collect();
                cells.push(SweepCell {
                    map: map_name.to_string(),
                    solver: solver.to_string(),
                    alpha,
                    beta,
                    outcomes,
                });
            }
        }
    }
    Ok(cells)
}

/// CSV aggregation table, one row per (map, solver, alpha, beta).
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out =
        String::from("map,solver,alpha,beta,runs,mean_rmse_m,failures,non_converged\n");
    for c in cells {
        let mean = c
            .mean_rmse()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "nan".to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.map,
            c.solver,
            c.alpha,
            c.beta,
            c.outcomes.len(),
            mean,
            c.failures(),
            c.non_converged()
        ));
    }
    out
}
