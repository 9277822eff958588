//! Evaluation: feature-extraction precision, calibration precision and
//! bead-phantom reconstruction accuracy.
//!
//! Spreads use population standard deviations. The spread of a 3-D point
//! set is the radial deviation `sqrt(mean ‖p_i − p̄‖²)`, i.e. the root of the
//! summed per-axis variances.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::detect::plane_normal_from_lines;
use crate::geometry::{RigidTransform, ScaleVector};
use crate::solver::{residual, CalibrationProblem, CalibrationResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate bead triangle")]
    DegenerateTriangle,
    #[error("invalid barycenter distance {0}")]
    InvalidDistance(f64),
}

/// Distance and angle statistics. Voxel figures divide by the geometric
/// mean voxel size.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrecisionReport {
    pub rms_distance_mm: f64,
    pub max_distance_mm: f64,
    pub rms_distance_vox: f64,
    pub max_distance_vox: f64,
    pub rms_angle_deg: f64,
    pub max_angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AccuracyReport {
    pub rms_distance_mm: f64,
    pub max_distance_mm: f64,
    pub rms_distance_vox: f64,
    pub max_distance_vox: f64,
    pub rms_angle_deg: f64,
    pub max_angle_deg: f64,
    pub pair_count: usize,
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn precision(distances_mm: &[f64], angles_deg: &[f64], scale: &ScaleVector) -> PrecisionReport {
    let s = scale.mean();
    let (rd, md) = (rms(distances_mm), max_abs(distances_mm));
    PrecisionReport {
        rms_distance_mm: rd,
        max_distance_mm: md,
        rms_distance_vox: rd / s,
        max_distance_vox: md / s,
        rms_angle_deg: rms(angles_deg),
        max_angle_deg: max_abs(angles_deg),
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Unsigned angle between two lines through the origin.
fn axis_angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs())
}

/// Sample-point distances to the membrane under the solved calibration,
/// and per observation the angle between the solved membrane normal and
/// the cross product of the two extracted line directions.
pub fn feature_precision(problem: &CalibrationProblem, result: &CalibrationResult) -> PrecisionReport {
    let scale = problem.scale();
    let mut distances = Vec::new();
    let mut angles = Vec::new();
    for obs in problem.observations() {
        let chain = problem.ph2m().compose(&obs.pose);
        for p in &obs.sample_points {
            distances.push(residual(&result.pose, &chain, scale, p).abs());
        }
        let u2m = chain.compose(&result.u2pr);
        let solved: Vector3<f64> = u2m.rotation.row(2).transpose();
        if let Ok(observed) = plane_normal_from_lines(obs, scale) {
            angles.push(axis_angle_between(&solved, &observed).to_degrees());
        }
    }
    precision(&distances, &angles, scale)
}

/// Spread of repeated calibrations: the scaled volume center mapped by each
/// `T_U2Pr` and the mapped `(0,0,1)` direction against its mean.
pub fn calibration_precision(
    results: &[RigidTransform],
    scale: &ScaleVector,
    dims: [usize; 3],
) -> Result<PrecisionReport, MetricsError> {
    if results.len() < 2 {
        return Err(MetricsError::InsufficientData(format!(
            "{} calibration(s), need at least 2",
            results.len()
        )));
    }
    let center = scale.to_metric(&Vector3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64)) * 0.5;
    let points: Vec<Vector3<f64>> = results.iter().map(|t| t.apply(&center)).collect();
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let deviations: Vec<f64> = points.iter().map(|p| (p - mean).norm()).collect();

    let dirs: Vec<Vector3<f64>> = results.iter().map(|t| t.apply_vector(&Vector3::z())).collect();
    let sum = dirs.iter().sum::<Vector3<f64>>();
    let angles: Vec<f64> = if sum.norm() < 1e-12 {
        vec![90.0; dirs.len()]
    } else {
        let mean_dir = sum.normalize();
        dirs.iter().map(|d| angle_between(d, &mean_dir).to_degrees()).collect()
    };
    Ok(precision(&deviations, &angles, scale))
}

/// Convenience wrapper over solver results.
pub fn calibration_precision_of(
    results: &[CalibrationResult],
    scale: &ScaleVector,
    dims: [usize; 3],
) -> Result<PrecisionReport, MetricsError> {
    let transforms: Vec<RigidTransform> = results.iter().map(|r| r.u2pr).collect();
    calibration_precision(&transforms, scale, dims)
}

/// Bead centers of one acquisition, sound-speed corrected voxel
/// coordinates, with the tracker pose `T_Pr2Ph` at acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct BeadAcquisition {
    pub beads: Vec<Vector3<f64>>,
    pub pose: RigidTransform,
}

/// How left and right acquisitions are paired per calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    /// Left `i` with right `i`: 10 + 10 volumes and 10 calibrations give
    /// 100 pairs.
    #[default]
    Indexed,
    /// Every left with every right.
    CrossProduct,
}

/// Barycenter and unit normal of the first three beads, tracker space.
fn triangle_in_tracker(
    acq: &BeadAcquisition,
    u2pr: &RigidTransform,
    scale: &ScaleVector,
) -> Result<(Vector3<f64>, Vector3<f64>), MetricsError> {
    if acq.beads.len() < 3 {
        return Err(MetricsError::InsufficientData(format!("{} bead(s) in a set", acq.beads.len())));
    }
    let map = acq.pose.compose(u2pr);
    let p: Vec<Vector3<f64>> = acq.beads[..3].iter().map(|b| map.apply(&scale.to_metric(b))).collect();
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let n = e1.cross(&e2);
    if n.norm() <= 1e-9 * e1.norm_squared().max(e2.norm_squared()) || n.norm() == 0.0 {
        return Err(MetricsError::DegenerateTriangle);
    }
    Ok(((p[0] + p[1] + p[2]) / 3.0, n.normalize()))
}

/// Reconstructed barycenter distance against `d_b` and the angle between
/// the triangle normals, over all pairs and calibrations. Normals are
/// compared as unoriented axes since bead order is arbitrary.
pub fn reconstruction_accuracy(
    left: &[BeadAcquisition],
    right: &[BeadAcquisition],
    calibrations: &[RigidTransform],
    d_b: f64,
    scale: &ScaleVector,
    pairing: Pairing,
) -> Result<AccuracyReport, MetricsError> {
    if !(d_b > 0.0) {
        return Err(MetricsError::InvalidDistance(d_b));
    }
    if left.is_empty() || right.is_empty() || calibrations.is_empty() {
        return Err(MetricsError::InsufficientData("empty bead set or no calibration".into()));
    }
    let pairs: Vec<(usize, usize)> = match pairing {
        Pairing::Indexed => {
            if left.len() != right.len() {
                return Err(MetricsError::InsufficientData(format!(
                    "indexed pairing needs equal set counts, got {} and {}",
                    left.len(),
                    right.len()
                )));
            }
            (0..left.len()).map(|i| (i, i)).collect()
        }
        Pairing::CrossProduct => (0..left.len()).flat_map(|i| (0..right.len()).map(move |j| (i, j))).collect(),
    };
    let mut distances = Vec::with_capacity(pairs.len() * calibrations.len());
    let mut angles = Vec::with_capacity(distances.capacity());
    for cal in calibrations {
        let l: Vec<_> = left
            .iter()
            .map(|a| triangle_in_tracker(a, cal, scale))
            .collect::<Result<_, _>>()?;
        let r: Vec<_> = right
            .iter()
            .map(|a| triangle_in_tracker(a, cal, scale))
            .collect::<Result<_, _>>()?;
        for &(i, j) in &pairs {
            distances.push(((l[i].0 - r[j].0).norm() - d_b).abs());
            angles.push(axis_angle_between(&l[i].1, &r[j].1).to_degrees());
        }
    }
    let p = precision(&distances, &angles, scale);
    Ok(AccuracyReport {
        rms_distance_mm: p.rms_distance_mm,
        max_distance_mm: p.max_distance_mm,
        rms_distance_vox: p.rms_distance_vox,
        max_distance_vox: p.max_distance_vox,
        rms_angle_deg: p.rms_angle_deg,
        max_angle_deg: p.max_angle_deg,
        pair_count: distances.len(),
    })
}

fn table(out: &mut String, title: &str, rows: &[(&str, f64, f64, f64)]) {
    writeln!(out, "[{title}]").unwrap();
    writeln!(out, "{:<6} {:>14} {:>14} {:>14}", "", "distance_mm", "distance_vox", "angle_deg").unwrap();
    for (label, mm, vox, deg) in rows {
        writeln!(out, "{label:<6} {mm:>14.6} {vox:>14.6} {deg:>14.6}").unwrap();
    }
}

impl PrecisionReport {
    /// Combines reports over equally sized samples: RMS of the RMS values,
    /// max of the maxima.
    pub fn pooled(reports: &[PrecisionReport]) -> PrecisionReport {
        let pick = |f: fn(&PrecisionReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        PrecisionReport {
            rms_distance_mm: rms(&pick(|r| r.rms_distance_mm)),
            max_distance_mm: max_abs(&pick(|r| r.max_distance_mm)),
            rms_distance_vox: rms(&pick(|r| r.rms_distance_vox)),
            max_distance_vox: max_abs(&pick(|r| r.max_distance_vox)),
            rms_angle_deg: rms(&pick(|r| r.rms_angle_deg)),
            max_angle_deg: max_abs(&pick(|r| r.max_angle_deg)),
        }
    }

    /// RMS and max rows with distance in mm and voxels and angle in degrees.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        table(
            &mut out,
            title,
            &[
                ("rms", self.rms_distance_mm, self.rms_distance_vox, self.rms_angle_deg),
                ("max", self.max_distance_mm, self.max_distance_vox, self.max_angle_deg),
            ],
        );
        out
    }
}

impl AccuracyReport {
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        table(
            &mut out,
            title,
            &[
                ("rms", self.rms_distance_mm, self.rms_distance_vox, self.rms_angle_deg),
                ("max", self.max_distance_mm, self.max_distance_vox, self.max_angle_deg),
            ],
        );
        writeln!(out, "pairs  {}", self.pair_count).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EulerPose;
    use crate::sim::{exact_observation, protocol_poses, PhantomScene};
    use crate::solver::{solve, SolverConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pose(a: [f64; 6]) -> RigidTransform {
        EulerPose::from_params(&a).to_transform()
    }

    #[test]
    fn voxel_columns_divide_by_scale() {
        let s = ScaleVector::isotropic(0.477).unwrap();
        for (mm, vox) in [(0.37, 0.77), (1.15, 2.41), (0.90, 1.90)] {
            // both published columns are rounded to two decimals
            let r = precision(&[mm], &[0.0], &s);
            assert_abs_diff_eq!(r.rms_distance_vox, vox, epsilon = 0.005 / 0.477 + 0.005);
        }
    }

    #[test]
    fn feature_precision_is_zero_on_exact_data() {
        let scene = PhantomScene::default();
        let obs = protocol_poses(&scene, 4)
            .iter()
            .map(|p| exact_observation(&scene, p, 10).unwrap())
            .collect();
        let problem = CalibrationProblem::new(obs, scene.ph2m, scene.scale).unwrap();
        let result = solve(&problem, &SolverConfig::default()).unwrap();
        let r = feature_precision(&problem, &result);
        assert!(r.max_distance_mm < 1e-6, "{r:?}");
        assert!(r.max_angle_deg < 1e-6, "{r:?}");
    }

    #[test]
    fn identical_calibrations_have_no_spread() {
        let t = pose([0.3, 0.2, -0.1, 10.0, 20.0, 30.0]);
        let s = ScaleVector::isotropic(0.477).unwrap();
        let r = calibration_precision(&[t, t, t], &s, [199; 3]).unwrap();
        assert_abs_diff_eq!(r.max_distance_mm, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.max_angle_deg, 0.0, epsilon = 1e-6);
        assert!(calibration_precision(&[t], &s, [199; 3]).is_err());
    }

    #[test]
    fn radial_population_std() {
        // two translations 2 mm apart: each 1 mm from the mean
        let s = ScaleVector::isotropic(1.0).unwrap();
        let a = pose([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = pose([0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let r = calibration_precision(&[a, b], &s, [10; 3]).unwrap();
        assert_abs_diff_eq!(r.rms_distance_mm, 1.0, epsilon = 1e-12);
        // duplicating every result leaves the population estimate unchanged
        let r2 = calibration_precision(&[a, b, a, b], &s, [10; 3]).unwrap();
        assert_abs_diff_eq!(r2.rms_distance_mm, r.rms_distance_mm, epsilon = 1e-12);
    }

    fn bead_sets() -> (Vec<BeadAcquisition>, Vec<BeadAcquisition>, RigidTransform, ScaleVector) {
        let s = ScaleVector::isotropic(0.5).unwrap();
        let u2pr = pose([0.2, -0.4, 0.9, 5.0, 6.0, 7.0]);
        let tri = |cx: f64| {
            [0.0f64, 2.1, 4.2].map(|a| Vector3::new(cx + 10.0 * a.cos(), 10.0 * a.sin(), 50.0))
        };
        let make = |cx: f64, p: RigidTransform| {
            let map = p.compose(&u2pr).inverse();
            BeadAcquisition {
                beads: tri(cx).iter().map(|b| s.to_voxel(&map.apply(b))).collect(),
                pose: p,
            }
        };
        let left = (0..3).map(|i| make(-30.0, pose([0.1 * i as f64, 0.2, 0.0, 1.0, i as f64, 3.0]))).collect();
        let right = (0..3).map(|i| make(30.0, pose([0.0, 0.1 * i as f64, 0.3, -2.0, 1.0, i as f64]))).collect();
        (left, right, u2pr, s)
    }

    #[test]
    fn exact_beads_reconstruct_perfectly() {
        let (l, r, u2pr, s) = bead_sets();
        let rep = reconstruction_accuracy(&l, &r, &[u2pr], 60.0, &s, Pairing::Indexed).unwrap();
        assert_eq!(rep.pair_count, 3);
        assert!(rep.max_distance_mm < 1e-9 && rep.max_angle_deg < 1e-6, "{rep:?}");
        let cross = reconstruction_accuracy(&l, &r, &[u2pr, u2pr], 60.0, &s, Pairing::CrossProduct).unwrap();
        assert_eq!(cross.pair_count, 18);
    }

    #[test]
    fn reconstruction_errors() {
        let (l, mut r, u2pr, s) = bead_sets();
        assert_eq!(
            reconstruction_accuracy(&l, &r, &[u2pr], 0.0, &s, Pairing::Indexed),
            Err(MetricsError::InvalidDistance(0.0))
        );
        r[1].beads[2] = r[1].beads[0] * 2.0 - r[1].beads[1];
        assert_eq!(
            reconstruction_accuracy(&l, &r, &[u2pr], 60.0, &s, Pairing::Indexed),
            Err(MetricsError::DegenerateTriangle)
        );
    }

    #[test]
    fn distance_error_is_symmetric_in_sides() {
        let (l, r, u2pr, s) = bead_sets();
        let off = pose([0.01, 0.0, -0.02, 0.5, 0.0, 0.3]).compose(&u2pr);
        let a = reconstruction_accuracy(&l, &r, &[off], 59.0, &s, Pairing::CrossProduct).unwrap();
        let b = reconstruction_accuracy(&r, &l, &[off], 59.0, &s, Pairing::CrossProduct).unwrap();
        assert_abs_diff_eq!(a.rms_distance_mm, b.rms_distance_mm, epsilon = 1e-12);
        assert!(a.rms_distance_mm > 0.0);
    }

    proptest! {
        #[test]
        fn reports_are_ordered(d in prop::collection::vec(0.0f64..10.0, 1..40),
                               a in prop::collection::vec(0.0f64..90.0, 1..40)) {
            let s = ScaleVector::isotropic(0.477).unwrap();
            let r = precision(&d, &a, &s);
            prop_assert!(r.rms_distance_mm <= r.max_distance_mm + 1e-12);
            prop_assert!(r.rms_angle_deg <= r.max_angle_deg + 1e-12);
            prop_assert!(r.rms_distance_mm >= 0.0);
        }

        #[test]
        fn feature_precision_is_chain_invariant(g in prop::array::uniform6(-1.0f64..1.0)) {
            let scene = PhantomScene::default();
            let obs: Vec<_> = protocol_poses(&scene, 8)
                .iter()
                .map(|p| exact_observation(&scene, p, 10).unwrap())
                .collect();
            let problem = CalibrationProblem::new(obs.clone(), scene.ph2m, scene.scale).unwrap();
            let result = solve(&problem, &SolverConfig { restarts: 2, ..Default::default() }).unwrap();
            let base = feature_precision(&problem, &result);
            // a common motion of the tracker world moves poses and pre-calibration together
            let w = pose([g[0], g[1], g[2], 50.0 * g[3], 50.0 * g[4], 50.0 * g[5]]);
            let moved: Vec<_> = obs.iter().map(|o| o.clone().with_pose(w.compose(&o.pose))).collect();
            let moved_problem = CalibrationProblem::new(moved, scene.ph2m.compose(&w.inverse()), scene.scale).unwrap();
            let r = feature_precision(&moved_problem, &result);
            prop_assert!((r.rms_distance_mm - base.rms_distance_mm).abs() < 1e-9);
            prop_assert!((r.rms_angle_deg - base.rms_angle_deg).abs() < 1e-6);
        }
    }
}
