//! Calibration solver.
//!
//! Every corrected membrane sample `p` of an acquisition must land on the
//! membrane plane, i.e. the third row of
//! `T_Ph2M · T_Pr2Ph · T_U2Pr · (s ⊙ p)` vanishes. The six parameters of
//! `T_U2Pr` (Euler angles and translation) are found by Levenberg-Marquardt
//! on the stacked residuals, started from random points and keeping the
//! best convergence.

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

use crate::detect::PlaneObservation;
use crate::geometry::{EulerPose, RigidTransform, ScaleVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid calibration problem: {0}")]
    InvalidProblem(String),
    #[error("no restart converged (best sum of squares {:.6e} mm²)", .best.cost)]
    NotConverged { best: Box<CalibrationResult> },
}

/// One membrane-plane constraint row: `ε = a3 · (R q + t) + a34`.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    a3: Vector3<f64>,
    a34: f64,
    q: Vector3<f64>,
    observation: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    observations: Vec<PlaneObservation>,
    ph2m: RigidTransform,
    scale: ScaleVector,
    constraints: Vec<Constraint>,
}

/// Minimum number of acquisitions that can constrain all six parameters.
pub const MIN_OBSERVATIONS: usize = 2;
pub const MIN_POINTS: usize = 6;

impl CalibrationProblem {
    pub fn new(
        observations: Vec<PlaneObservation>,
        ph2m: RigidTransform,
        scale: ScaleVector,
    ) -> Result<Self, SolverError> {
        let problem = Self::new_unchecked(observations, ph2m, scale);
        if problem.observations.len() < MIN_OBSERVATIONS {
            return Err(SolverError::InvalidProblem(format!(
                "{} observation(s); at least {MIN_OBSERVATIONS} required",
                problem.observations.len()
            )));
        }
        if problem.constraints.len() < MIN_POINTS {
            return Err(SolverError::InvalidProblem(format!(
                "{} sample points; at least {MIN_POINTS} required",
                problem.constraints.len()
            )));
        }
        Ok(problem)
    }

    /// Skips the size checks; used for diagnostics on partial data.
    pub fn new_unchecked(observations: Vec<PlaneObservation>, ph2m: RigidTransform, scale: ScaleVector) -> Self {
        let mut constraints = Vec::new();
        for (i, obs) in observations.iter().enumerate() {
            let a = ph2m.compose(&obs.pose);
            let a3: Vector3<f64> = a.rotation.row(2).transpose();
            for p in &obs.sample_points {
                constraints.push(Constraint {
                    a3,
                    a34: a.translation.z,
                    q: scale.to_metric(p),
                    observation: i,
                });
            }
        }
        Self {
            observations,
            ph2m,
            scale,
            constraints,
        }
    }

    pub fn observations(&self) -> &[PlaneObservation] {
        &self.observations
    }

    pub fn ph2m(&self) -> &RigidTransform {
        &self.ph2m
    }

    pub fn scale(&self) -> &ScaleVector {
        &self.scale
    }

    pub fn point_count(&self) -> usize {
        self.constraints.len()
    }

    /// Stacked residuals, mm.
    pub fn residuals(&self, pose: &EulerPose) -> Vec<f64> {
        let r = pose.rotation();
        let t = pose.translation;
        self.constraints
            .iter()
            .map(|c| c.a3.dot(&(r * c.q + t)) + c.a34)
            .collect()
    }

    /// Sum of squared residuals, mm².
    pub fn cost(&self, pose: &EulerPose) -> f64 {
        self.residuals(pose).iter().map(|e| e * e).sum()
    }

    /// Analytic Jacobian rows `∂ε/∂[yaw, pitch, roll, tx, ty, tz]`.
    pub fn jacobian(&self, pose: &EulerPose) -> Vec<[f64; 6]> {
        let d = pose.rotation_derivatives();
        self.constraints
            .iter()
            .map(|c| {
                [
                    c.a3.dot(&(d[0] * c.q)),
                    c.a3.dot(&(d[1] * c.q)),
                    c.a3.dot(&(d[2] * c.q)),
                    c.a3.x,
                    c.a3.y,
                    c.a3.z,
                ]
            })
            .collect()
    }

    /// Central finite-difference Jacobian with parameter step `step`.
    pub fn numeric_jacobian(&self, pose: &EulerPose, step: f64) -> Vec<[f64; 6]> {
        let base = pose.to_params();
        let mut rows = vec![[0.0; 6]; self.constraints.len()];
        for k in 0..6 {
            let (mut plus, mut minus) = (base, base);
            plus[k] += step;
            minus[k] -= step;
            let rp = self.residuals(&EulerPose::from_params(&plus));
            let rm = self.residuals(&EulerPose::from_params(&minus));
            for (row, (a, b)) in rows.iter_mut().zip(rp.iter().zip(&rm)) {
                row[k] = (a - b) / (2.0 * step);
            }
        }
        rows
    }
}

/// `ε` for one voxel: the membrane-space z of the scaled point under the
/// chain `a = T_Ph2M · T_Pr2Ph` and calibration `b`.
pub fn residual(b: &EulerPose, a: &RigidTransform, scale: &ScaleVector, p: &Vector3<f64>) -> f64 {
    let q = b.to_transform().apply(&scale.to_metric(p));
    a.rotation.row(2).transpose().dot(&q) + a.translation.z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub seed: u64,
    pub restarts: usize,
    /// Half-width of the uniform translation initialization range, mm.
    pub translation_range: f64,
    pub initial_damping: f64,
    pub damping_factor: f64,
    /// Termination on relative decrease of the sum of squares.
    pub relative_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 20,
            translation_range: 200.0,
            initial_damping: 1e-3,
            damping_factor: 10.0,
            relative_tolerance: 1e-12,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOutcome {
    pub pose: EulerPose,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

const DAMPING_CEILING: f64 = 1e20;
// below this sum of squares (mm²) the fit is exact to round-off
const COST_FLOOR: f64 = 1e-28;

/// Marquardt-scaled Levenberg-Marquardt from `init`.
pub fn levenberg_marquardt(problem: &CalibrationProblem, init: &EulerPose, cfg: &SolverConfig) -> LmOutcome {
    let mut pose = *init;
    let mut cost = problem.cost(&pose);
    let mut lambda = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        if cost <= COST_FLOOR {
            converged = true;
            break;
        }
        let residuals = problem.residuals(&pose);
        let jac = problem.jacobian(&pose);
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (row, e) in jac.iter().zip(&residuals) {
            let j = Vector6::from_row_slice(row);
            jtj += j * j.transpose();
            jtr += j * *e;
        }
        let diag_floor = jtj.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;

        let mut accepted = None;
        while lambda < DAMPING_CEILING {
            let mut lhs = jtj;
            for i in 0..6 {
                lhs[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            let step = lhs.cholesky().map(|c| c.solve(&(-jtr)));
            if let Some(step) = step {
                let mut params = pose.to_params();
                for (p, d) in params.iter_mut().zip(step.iter()) {
                    *p += d;
                }
                let candidate = EulerPose::from_params(&params);
                let new_cost = problem.cost(&candidate);
                if new_cost < cost {
                    lambda = (lambda / cfg.damping_factor).max(1e-15);
                    accepted = Some((candidate, new_cost));
                    break;
                }
            }
            lambda *= cfg.damping_factor;
        }

        match accepted {
            Some((candidate, new_cost)) => {
                let relative = (cost - new_cost) / cost;
                pose = candidate;
                cost = new_cost;
                if relative < cfg.relative_tolerance || cost <= COST_FLOOR {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction left at round-off level
                converged = true;
                break;
            }
        }
    }

    LmOutcome {
        pose,
        cost,
        iterations,
        converged,
    }
}

/// Singular values of the residual Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Set when `smallest / largest < 1e-6`.
    pub condition_flag: bool,
}

pub const OBSERVABILITY_STEP: f64 = 1e-5;
pub const CONDITION_THRESHOLD: f64 = 1e-6;

impl ObservabilityReport {
    /// Singular values above `CONDITION_THRESHOLD` relative to the largest.
    pub fn numerical_rank(&self) -> usize {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .filter(|&&s| s > CONDITION_THRESHOLD * max)
            .count()
    }

    pub fn ratio(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&max), Some(&min)) if max > 0.0 => min / max,
            _ => 0.0,
        }
    }
}

/// Observability of the six calibration parameters at `at`.
pub fn observability(problem: &CalibrationProblem, at: &EulerPose) -> ObservabilityReport {
    let rows = problem.numeric_jacobian(at, OBSERVABILITY_STEP);
    if rows.is_empty() {
        return ObservabilityReport {
            singular_values: vec![0.0; 6],
            condition_flag: true,
        };
    }
    let m = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    let mut singular_values: Vec<f64> = m.singular_values().iter().copied().collect();
    singular_values.resize(6, 0.0);
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let report = ObservabilityReport {
        singular_values,
        condition_flag: false,
    };
    let flag = !(report.ratio() >= CONDITION_THRESHOLD);
    ObservabilityReport {
        condition_flag: flag,
        ..report
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Estimated `T_U2Pr`.
    pub u2pr: RigidTransform,
    pub pose: EulerPose,
    /// Sum of squared residuals, mm².
    pub cost: f64,
    pub rms_residual: f64,
    pub max_residual: f64,
    /// RMS residual per observation, mm.
    pub per_observation_residuals: Vec<f64>,
    pub diagnostics: ObservabilityReport,
    pub restarts_converged: usize,
    pub best_restart: usize,
}

fn summarize(problem: &CalibrationProblem, outcome: &LmOutcome, converged: usize, best: usize) -> CalibrationResult {
    let residuals = problem.residuals(&outcome.pose);
    let n = residuals.len().max(1) as f64;
    let rms = (residuals.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let max = residuals.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut sums = vec![(0.0, 0usize); problem.observations.len()];
    for (c, e) in problem.constraints.iter().zip(&residuals) {
        sums[c.observation].0 += e * e;
        sums[c.observation].1 += 1;
    }
    let per_obs = sums
        .iter()
        .map(|&(s, k)| if k > 0 { (s / k as f64).sqrt() } else { 0.0 })
        .collect();
    let u2pr = outcome.pose.to_transform();
    CalibrationResult {
        u2pr,
        pose: EulerPose::from_transform(&u2pr),
        cost: outcome.cost,
        rms_residual: rms,
        max_residual: max,
        per_observation_residuals: per_obs,
        diagnostics: observability(problem, &outcome.pose),
        restarts_converged: converged,
        best_restart: best,
    }
}

/// Random initializations: translations uniform in `±translation_range`,
/// every angle uniform over the full circle.
pub fn initial_guesses(cfg: &SolverConfig) -> Vec<EulerPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.translation_range;
    (0..cfg.restarts.max(1))
        .map(|_| {
            let angles = Vector3::new(
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
            );
            let t = Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
            EulerPose::new(angles, t)
        })
        .collect()
}

/// Best Levenberg-Marquardt convergence over all restarts. Ties on the sum
/// of squares go to the lower restart index.
pub fn solve(problem: &CalibrationProblem, cfg: &SolverConfig) -> Result<CalibrationResult, SolverError> {
    let outcomes: Vec<LmOutcome> = initial_guesses(cfg)
        .iter()
        .map(|init| levenberg_marquardt(problem, init, cfg))
        .collect();
    let converged = outcomes.iter().filter(|o| o.converged).count();
    let pick = |only_converged: bool| {
        outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.converged || !only_converged)
            .fold(None::<(usize, &LmOutcome)>, |best, (i, o)| match best {
                Some((_, b)) if b.cost <= o.cost => best,
                _ => Some((i, o)),
            })
    };
    if let Some((i, best)) = pick(true) {
        return Ok(summarize(problem, best, converged, i));
    }
    let (i, best) = pick(false).expect("at least one restart");
    Err(SolverError::NotConverged {
        best: Box::new(summarize(problem, best, 0, i)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Line2D;
    use approx::assert_abs_diff_eq;

    fn obs(points: Vec<Vector3<f64>>, pose: RigidTransform) -> PlaneObservation {
        PlaneObservation {
            id: String::new(),
            line_xy: Line2D::new(0.0, 0.0),
            line_zy: Line2D::new(0.0, 0.0),
            slice_z: 0,
            slice_x: 0,
            sample_points: points,
            pose,
        }
    }

    #[test]
    fn residual_identity_examples() {
        let id = RigidTransform::identity();
        let b = EulerPose::from_transform(&id);
        let s = ScaleVector::isotropic(1.0).unwrap();
        assert_eq!(residual(&b, &id, &s, &Vector3::new(1.0, 2.0, 0.0)), 0.0);
        assert_eq!(residual(&b, &id, &s, &Vector3::new(1.0, 2.0, 5.0)), 5.0);
    }

    #[test]
    fn problem_validation() {
        let s = ScaleVector::isotropic(1.0).unwrap();
        let one = vec![obs(vec![Vector3::zeros(); 10], RigidTransform::identity())];
        assert!(CalibrationProblem::new(one, RigidTransform::identity(), s).is_err());
        let few = vec![
            obs(vec![Vector3::zeros(); 2], RigidTransform::identity()),
            obs(vec![Vector3::zeros(); 2], RigidTransform::identity()),
        ];
        assert!(CalibrationProblem::new(few, RigidTransform::identity(), s).is_err());
    }

    #[test]
    fn residual_matches_problem_rows() {
        let s = ScaleVector::new(0.4, 0.5, 0.6).unwrap();
        let ph2m = EulerPose::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)).to_transform();
        let pose = EulerPose::new(Vector3::new(-0.4, 0.3, 1.0), Vector3::new(10.0, -20.0, 5.0)).to_transform();
        let pts = vec![Vector3::new(10.0, 20.0, 30.0), Vector3::new(-5.0, 7.0, 1.0)];
        let problem = CalibrationProblem::new_unchecked(vec![obs(pts.clone(), pose)], ph2m, s);
        let b = EulerPose::new(Vector3::new(0.7, -0.1, 0.2), Vector3::new(3.0, 4.0, 5.0));
        let rows = problem.residuals(&b);
        let a = ph2m.compose(&pose);
        for (p, r) in pts.iter().zip(rows) {
            assert_abs_diff_eq!(residual(&b, &a, &s, p), r, epsilon = 1e-10);
            let chain = crate::geometry::apply_chain(&ph2m, &pose, &b.to_transform(), &s, p);
            assert_abs_diff_eq!(chain.z, r, epsilon = 1e-10);
        }
    }

    #[test]
    fn lm_is_deterministic() {
        let s = ScaleVector::isotropic(1.0).unwrap();
        let pts: Vec<_> = (0..12).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.3, 1.0)).collect();
        let poses = [
            EulerPose::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)),
            EulerPose::new(Vector3::new(0.9, -0.2, 0.3), Vector3::new(-1.0, 2.0, 3.0)),
            EulerPose::new(Vector3::new(0.1, 0.7, -1.3), Vector3::new(1.0, -2.0, 3.0)),
        ];
        let problem = CalibrationProblem::new(
            poses.iter().map(|p| obs(pts.clone(), p.to_transform())).collect(),
            RigidTransform::identity(),
            s,
        )
        .unwrap();
        let cfg = SolverConfig {
            restarts: 4,
            seed: 9,
            ..Default::default()
        };
        let a = solve(&problem, &cfg).unwrap();
        let b = solve(&problem, &cfg).unwrap();
        assert_eq!(a.pose.to_params().map(f64::to_bits), b.pose.to_params().map(f64::to_bits));
        assert!(a.rms_residual <= a.max_residual);
    }

    fn exact_problem(poses: &[RigidTransform]) -> (crate::sim::PhantomScene, CalibrationProblem) {
        let scene = crate::sim::PhantomScene::default();
        let observations = poses
            .iter()
            .map(|p| crate::sim::exact_observation(&scene, p, 10).unwrap())
            .collect();
        let problem = CalibrationProblem::new(observations, scene.ph2m, scene.scale).unwrap();
        (scene, problem)
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let scene = crate::sim::PhantomScene::default();
        let (_, problem) = exact_problem(&crate::sim::protocol_poses(&scene, 2));
        let at = EulerPose::new(Vector3::new(0.3, -0.2, 1.1), Vector3::new(10.0, -30.0, 50.0));
        let a = problem.jacobian(&at);
        let n = problem.numeric_jacobian(&at, 1e-6);
        for (ra, rn) in a.iter().zip(&n) {
            for k in 0..6 {
                assert_abs_diff_eq!(ra[k], rn[k], epsilon = 1e-4 * (1.0 + ra[k].abs()));
            }
        }
    }

    #[test]
    fn recovers_truth_from_exact_protocol() {
        let scene = crate::sim::PhantomScene::default();
        let (scene, problem) = exact_problem(&crate::sim::protocol_poses(&scene, 11));
        let result = solve(&problem, &SolverConfig::default()).unwrap();
        assert!(result.rms_residual < 1e-9, "{}", result.rms_residual);
        assert!((result.u2pr.translation - scene.true_u2pr.translation).norm() < 1e-6);
        assert!(result.u2pr.rotation_angle_to(&scene.true_u2pr).to_degrees() < 1e-5);
        assert!(!result.diagnostics.condition_flag);
        assert_eq!(result.diagnostics.numerical_rank(), 6);
    }

    #[test]
    fn identical_poses_are_flagged_rank_deficient() {
        let scene = crate::sim::PhantomScene::default();
        let (scene, problem) = exact_problem(&crate::sim::degenerate_poses(&scene));
        let report = observability(&problem, &EulerPose::from_transform(&scene.true_u2pr));
        assert!(report.condition_flag);
        assert!(report.numerical_rank() <= 3, "{:?}", report.singular_values);
    }
}
