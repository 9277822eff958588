//! End-to-end synthetic sessions: simulated acquisitions, calibration from
//! rendered volumes and the repeated-calibration evaluation campaign.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::detect::{extract_plane_with, DetectError, ExtractOptions, LineOverrides, PlaneObservation};
use crate::geometry::RigidTransform;
use crate::metrics::{
    calibration_precision_of, feature_precision, reconstruction_accuracy, AccuracyReport, BeadAcquisition,
    MetricsError, Pairing, PrecisionReport,
};
use crate::sim::{
    derive_seed, locate_beads, measured_pose, protocol_poses, render_bead_volumes, render_volume, BeadPhantom,
    BeadVolume, NoiseModel, PhantomScene, Side, SimError,
};
use crate::solver::{solve, CalibrationProblem, CalibrationResult, SolverConfig, SolverError};
use crate::sos::{correct_point, ProbeGeometry, SosContext, SosError};
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("membrane detection failed in every volume")]
    NoObservations,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sos(#[from] SosError),
}

/// One simulated membrane acquisition.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub id: String,
    pub volume: Volume,
    pub true_pose: RigidTransform,
    /// Tracker reading, `true_pose` plus pose noise.
    pub measured_pose: RigidTransform,
}

pub fn acquisition_id(index: usize) -> String {
    format!("vol{index:02}")
}

/// Renders one volume per pose. Stream layout under `seed`: `2i` renders
/// volume `i`, `2i + 1` draws its tracker noise.
pub fn simulate_acquisitions(
    scene: &PhantomScene,
    noise: &NoiseModel,
    poses: &[RigidTransform],
    seed: u64,
) -> Result<Vec<Acquisition>, SimError> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let volume = render_volume(scene, pose, noise, derive_seed(seed, 2 * i as u64))?;
            Ok(Acquisition {
                id: acquisition_id(i),
                volume,
                true_pose: *pose,
                measured_pose: measured_pose(pose, noise, derive_seed(seed, 2 * i as u64 + 1)),
            })
        })
        .collect()
}

/// A volume ready for extraction.
#[derive(Debug, Clone, Copy)]
pub struct VolumeInput<'a> {
    pub id: &'a str,
    pub volume: &'a Volume,
    pub probe: &'a ProbeGeometry,
    pub sos: SosContext,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub problem: CalibrationProblem,
    pub result: CalibrationResult,
    pub feature: PrecisionReport,
    /// Volumes whose membrane could not be extracted.
    pub failures: Vec<(String, DetectError)>,
}

/// Extracts every volume, skipping failed detections, then solves.
pub fn extract_observations<'a>(
    inputs: &[VolumeInput<'a>],
    overrides: &dyn Fn(&str) -> LineOverrides,
    opts: &ExtractOptions,
) -> (Vec<PlaneObservation>, Vec<(String, DetectError)>) {
    let mut observations = Vec::new();
    let mut failures = Vec::new();
    for input in inputs {
        match extract_plane_with(input.volume, input.probe, &input.sos, &overrides(input.id), opts) {
            Ok(obs) => observations.push(obs.with_id(input.id).with_pose(input.pose)),
            Err(e) => failures.push((input.id.to_string(), e)),
        }
    }
    (observations, failures)
}

pub fn calibrate(
    inputs: &[VolumeInput<'_>],
    ph2m: &RigidTransform,
    overrides: &dyn Fn(&str) -> LineOverrides,
    opts: &ExtractOptions,
    solver: &SolverConfig,
) -> Result<CalibrationRun, CampaignError> {
    let (observations, failures) = extract_observations(inputs, overrides, opts);
    if observations.is_empty() {
        return Err(CampaignError::NoObservations);
    }
    let scale = *inputs[0].volume.scale();
    let problem = CalibrationProblem::new(observations, *ph2m, scale)?;
    let result = solve(&problem, solver)?;
    let feature = feature_precision(&problem, &result);
    Ok(CalibrationRun {
        problem,
        result,
        feature,
        failures,
    })
}

/// Adds the configured per-axis localization error to located beads.
pub fn jitter_beads(beads: &mut [Vector3<f64>], sigma_vox: f64, seed: u64) {
    if sigma_vox <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma_vox).unwrap();
    for b in beads {
        for k in 0..3 {
            b[k] += n.sample(&mut rng);
        }
    }
}

/// Bead acquisitions as an operator would digitize them: located,
/// perturbed by `bead_jitter`, tracker pose with pose noise.
#[derive(Debug, Clone)]
pub struct LocatedBeads {
    pub id: String,
    pub side: Side,
    /// Displayed (uncorrected) voxel coordinates.
    pub beads: Vec<Vector3<f64>>,
    pub measured_pose: RigidTransform,
}

pub fn bead_id(side: Side, index: usize) -> String {
    match side {
        Side::Left => format!("beadL{index:02}"),
        Side::Right => format!("beadR{index:02}"),
    }
}

pub fn digitize_beads(volumes: &[BeadVolume], noise: &NoiseModel, seed: u64) -> Vec<LocatedBeads> {
    let (mut nl, mut nr) = (0, 0);
    volumes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut beads = locate_beads(&v.volume, 3, noise.background_level);
            jitter_beads(&mut beads, noise.bead_jitter, derive_seed(seed, 2 * i as u64));
            let counter = match v.side {
                Side::Left => &mut nl,
                Side::Right => &mut nr,
            };
            let id = bead_id(v.side, *counter);
            *counter += 1;
            LocatedBeads {
                id,
                side: v.side,
                beads,
                measured_pose: measured_pose(&v.true_pose, noise, derive_seed(seed, 2 * i as u64 + 1)),
            }
        })
        .collect()
}

/// Sound-speed corrects digitized beads and splits them by side.
pub fn bead_sets(
    located: &[LocatedBeads],
    scene_scale: &crate::geometry::ScaleVector,
    probe: &ProbeGeometry,
    sos: &SosContext,
) -> Result<(Vec<BeadAcquisition>, Vec<BeadAcquisition>), SosError> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for l in located {
        let beads = l
            .beads
            .iter()
            .map(|b| correct_point(b, scene_scale, probe, sos))
            .collect::<Result<Vec<_>, _>>()?;
        let acq = BeadAcquisition {
            beads,
            pose: l.measured_pose,
        };
        match l.side {
            Side::Left => left.push(acq),
            Side::Right => right.push(acq),
        }
    }
    Ok((left, right))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignConfig {
    pub seed: u64,
    pub calibrations: usize,
    pub bead_volumes: usize,
    pub noise: NoiseModel,
    pub solver: SolverConfig,
    pub extract: ExtractOptions,
    pub pairing: Pairing,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            calibrations: 10,
            bead_volumes: 20,
            noise: NoiseModel::default(),
            solver: SolverConfig::default(),
            extract: ExtractOptions::default(),
            pairing: Pairing::Indexed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    /// Feature precision pooled over all calibrations.
    pub feature: PrecisionReport,
    pub precision: PrecisionReport,
    pub accuracy: AccuracyReport,
    pub calibrations: Vec<CalibrationResult>,
    pub detection_failures: usize,
}

impl CampaignReport {
    /// The three evaluation tables, fixed point with six decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.feature.to_table("feature extraction precision"));
        out.push('\n');
        out.push_str(&self.precision.to_table("calibration precision"));
        out.push('\n');
        out.push_str(&self.accuracy.to_table("reconstruction accuracy"));
        out
    }
}

/// Repeated independent calibrations of one scene plus a bead session.
///
/// Calibration `i` uses its own protocol jitter, rendering noise, tracker
/// noise and solver seed, all derived from `cfg.seed`. The bead volumes
/// are shared by all calibrations.
pub fn run_campaign(
    scene: &PhantomScene,
    phantom: &BeadPhantom,
    cfg: &CampaignConfig,
) -> Result<CampaignReport, CampaignError> {
    let mut results = Vec::with_capacity(cfg.calibrations);
    let mut features = Vec::with_capacity(cfg.calibrations);
    let mut detection_failures = 0;
    for i in 0..cfg.calibrations {
        let base = derive_seed(cfg.seed, 100 + i as u64);
        let poses = protocol_poses(scene, derive_seed(base, 0));
        let acquisitions = simulate_acquisitions(scene, &cfg.noise, &poses, derive_seed(base, 1))?;
        let inputs: Vec<VolumeInput> = acquisitions
            .iter()
            .map(|a| VolumeInput {
                id: &a.id,
                volume: &a.volume,
                probe: &scene.probe,
                sos: scene.sos,
                pose: a.measured_pose,
            })
            .collect();
        let solver = SolverConfig {
            seed: derive_seed(base, 2),
            ..cfg.solver
        };
        let run = calibrate(&inputs, &scene.ph2m, &|_| LineOverrides::default(), &cfg.extract, &solver)?;
        detection_failures += run.failures.len();
        features.push(run.feature);
        results.push(run.result);
    }
    let precision = calibration_precision_of(&results, &scene.scale, scene.dims)?;
    let bead_volumes = render_bead_volumes(scene, phantom, cfg.bead_volumes, &cfg.noise, derive_seed(cfg.seed, 1))?;
    let located = digitize_beads(&bead_volumes, &cfg.noise, derive_seed(cfg.seed, 2));
    let (left, right) = bead_sets(&located, &scene.scale, &scene.probe, &scene.sos)?;
    let transforms: Vec<RigidTransform> = results.iter().map(|r| r.u2pr).collect();
    let accuracy = reconstruction_accuracy(
        &left,
        &right,
        &transforms,
        phantom.barycenter_distance(),
        &scene.scale,
        cfg.pairing,
    )?;
    Ok(CampaignReport {
        feature: PrecisionReport::pooled(&features),
        precision,
        accuracy,
        calibrations: results,
        detection_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bead_ids_count_per_side() {
        assert_eq!(bead_id(Side::Left, 3), "beadL03");
        assert_eq!(bead_id(Side::Right, 0), "beadR00");
        assert_eq!(acquisition_id(7), "vol07");
    }

    #[test]
    fn bead_jitter_is_seeded() {
        let mut a = vec![Vector3::zeros(); 3];
        let mut b = a.clone();
        jitter_beads(&mut a, 0.5, 3);
        jitter_beads(&mut b, 0.5, 3);
        assert_eq!(a, b);
        assert!(a[0].norm() > 0.0);
        let mut c = vec![Vector3::zeros(); 3];
        jitter_beads(&mut c, 0.0, 3);
        assert_eq!(c[0], Vector3::zeros());
    }
}
