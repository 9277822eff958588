//! Synthetic membrane phantom with known ground truth.
//!
//! The simulator inverts the calibration chain: a voxel is bright when its
//! sound-speed corrected position maps onto the membrane plane. Rendering
//! applies the scanner's sectorial distortion by construction, so
//! [`correct_point`](crate::sos::correct_point) undoes it exactly.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::detect::{Line2D, PlaneObservation};
use crate::geometry::{EulerPose, Plane, RigidTransform, ScaleVector};
use crate::sos::{correct_metric, distort_point, ProbeGeometry, SosContext, TISSUE_SOS};
use crate::volume::{SliceKind, Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("membrane does not intersect the imaged volume")]
    EmptyScene,
    #[error("bead placement failed: {0}")]
    Placement(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Ground truth of a simulated calibration setup.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    pub true_u2pr: RigidTransform,
    pub ph2m: RigidTransform,
    pub scale: ScaleVector,
    pub dims: [usize; 3],
    pub probe: ProbeGeometry,
    pub sos: SosContext,
}

impl Default for PhantomScene {
    /// 199³ isotropic voxels of 0.477 mm, water at 23 °C.
    fn default() -> Self {
        let deg = |v: f64| v.to_radians();
        Self {
            true_u2pr: EulerPose::new(
                Vector3::new(deg(20.0), deg(-35.0), deg(110.0)),
                Vector3::new(35.0, -80.0, 140.0),
            )
            .to_transform(),
            ph2m: EulerPose::new(
                Vector3::new(deg(10.0), deg(45.0), deg(-15.0)),
                Vector3::new(-20.0, 60.0, 300.0),
            )
            .to_transform(),
            scale: ScaleVector::isotropic(0.477).unwrap(),
            dims: [199, 199, 199],
            probe: ProbeGeometry::new(Vector3::new(99.0, -40.0, 99.0), 15.0).unwrap(),
            sos: SosContext::from_temperature(23.0, TISSUE_SOS).unwrap(),
        }
    }
}

impl PhantomScene {
    /// `T_Ph2M · pose · T_U2Pr`: metric volume space into membrane space.
    pub fn chain(&self, pose: &RigidTransform) -> RigidTransform {
        self.ph2m.compose(pose).compose(&self.true_u2pr)
    }

    /// Probe pose producing the given volume-to-membrane chain.
    pub fn pose_for_chain(&self, u2m: &RigidTransform) -> RigidTransform {
        self.ph2m.inverse().compose(u2m).compose(&self.true_u2pr.inverse())
    }

    /// Membrane plane in metric volume coordinates.
    pub fn membrane_in_volume(&self, pose: &RigidTransform) -> Plane {
        Plane::xy().transformed(&self.chain(pose).inverse())
    }

    pub fn metric_center(&self) -> Vector3<f64> {
        let d = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64);
        self.scale.to_metric(&(d * 0.5))
    }
}

/// Rendering and measurement perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// 3-D RMS of the tracker translation error, mm.
    pub pose_noise_rms: f64,
    /// Standard deviation of the per-acquisition membrane displacement along
    /// its normal, voxels.
    pub line_jitter: f64,
    /// Multiplicative intensity noise `I·(1 + σ·N(0,1))`.
    pub speckle_sigma: f64,
    pub background_level: u8,
    /// Full width at half maximum of the membrane profile, voxels. Zero
    /// renders a hard half-voxel slab.
    pub beam_width: f64,
    /// Standard deviation of the per-axis bead localization error, voxels.
    pub bead_jitter: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            pose_noise_rms: 0.0,
            line_jitter: 0.0,
            speckle_sigma: 0.0,
            background_level: 20,
            beam_width: 3.0,
            bead_jitter: 0.0,
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pose_noise_rms: 0.25,
            line_jitter: 0.5,
            speckle_sigma: 0.2,
            ..Self::noiseless()
        }
    }
}

/// Independent, reproducible seed for stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the acquisition protocol: the membrane as seen from the probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolStep {
    /// Membrane normal tilt away from the beam axis, degrees.
    pub tilt_deg: f64,
    /// Azimuth of the tilt about the beam axis, degrees.
    pub azimuth_deg: f64,
    /// Membrane offset from the volume center along its normal, mm.
    pub distance_mm: f64,
    /// Probe translation parallel to the membrane, mm.
    pub shift_mm: (f64, f64),
}

/// 3 membrane-distance translations, 2 in-plane translations, 3 axial
/// rotations and 4 compound tilts.
pub const PROTOCOL_TABLE: [ProtocolStep; 12] = [
    ProtocolStep { tilt_deg: 0.0, azimuth_deg: 0.0, distance_mm: -12.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 0.0, azimuth_deg: 0.0, distance_mm: 0.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 0.0, azimuth_deg: 0.0, distance_mm: 12.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 0.0, azimuth_deg: 0.0, distance_mm: 0.0, shift_mm: (20.0, 0.0) },
    ProtocolStep { tilt_deg: 0.0, azimuth_deg: 0.0, distance_mm: 0.0, shift_mm: (0.0, 20.0) },
    ProtocolStep { tilt_deg: 25.0, azimuth_deg: -35.0, distance_mm: 5.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 25.0, azimuth_deg: 25.0, distance_mm: -5.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 25.0, azimuth_deg: 40.0, distance_mm: 0.0, shift_mm: (0.0, 0.0) },
    ProtocolStep { tilt_deg: 20.0, azimuth_deg: 90.0, distance_mm: 8.0, shift_mm: (5.0, 0.0) },
    ProtocolStep { tilt_deg: 35.0, azimuth_deg: 180.0, distance_mm: -8.0, shift_mm: (0.0, 5.0) },
    ProtocolStep { tilt_deg: 15.0, azimuth_deg: 135.0, distance_mm: 10.0, shift_mm: (-5.0, 0.0) },
    ProtocolStep { tilt_deg: 40.0, azimuth_deg: -90.0, distance_mm: -10.0, shift_mm: (0.0, -5.0) },
];

/// Volume-to-membrane chain for a membrane with unit normal `normal`
/// (volume frame) through `point`, with in-plane spin `spin` about the
/// normal.
fn chain_for_plane(normal: &Vector3<f64>, point: &Vector3<f64>, spin: f64) -> RigidTransform {
    let n = normal.normalize();
    let e1 = (Vector3::x() - n * n.x).normalize();
    let e1 = RigidTransform::from_axis_angle(n, spin).apply_vector(&e1);
    let e2 = n.cross(&e1);
    let m2u = RigidTransform::new(Matrix3::from_columns(&[e1, e2, n]), *point);
    m2u.inverse()
}

fn step_normal(tilt_deg: f64, azimuth_deg: f64) -> Vector3<f64> {
    let tilt = RigidTransform::from_axis_angle(Vector3::x(), tilt_deg.to_radians());
    let az = RigidTransform::from_axis_angle(Vector3::y(), azimuth_deg.to_radians());
    az.apply_vector(&tilt.apply_vector(&Vector3::y()))
}

/// Tracker poses `T_Pr2Ph` for the twelve-step protocol. The seed jitters
/// each row (±3° tilt, ±5° azimuth, ±2 mm distance) and draws the in-plane
/// spin, which leaves the membrane constraint unchanged.
pub fn protocol_poses(scene: &PhantomScene, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = scene.metric_center();
    PROTOCOL_TABLE
        .iter()
        .map(|step| {
            let tilt = step.tilt_deg + rng.random_range(-3.0..3.0);
            let az = step.azimuth_deg + rng.random_range(-5.0..5.0);
            let dist = step.distance_mm + rng.random_range(-2.0..2.0);
            let spin = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let n = step_normal(tilt, az);
            let e1 = (Vector3::x() - n * n.x).normalize();
            let e2 = n.cross(&e1);
            let point = center + n * dist + e1 * step.shift_mm.0 + e2 * step.shift_mm.1;
            scene.pose_for_chain(&chain_for_plane(&n, &point, spin))
        })
        .collect()
}

/// Twelve copies of the central protocol pose: constrains only 3 DoF.
pub fn degenerate_poses(scene: &PhantomScene) -> Vec<RigidTransform> {
    let pose = scene.pose_for_chain(&chain_for_plane(&Vector3::y(), &scene.metric_center(), 0.3));
    vec![pose; 12]
}

/// Tracker reading of `pose` with isotropic translation noise of 3-D RMS
/// `pose_noise_rms`.
pub fn measured_pose(pose: &RigidTransform, noise: &NoiseModel, seed: u64) -> RigidTransform {
    if noise.pose_noise_rms <= 0.0 {
        return *pose;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise.pose_noise_rms / 3f64.sqrt()).unwrap();
    let dt = Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
    RigidTransform::new(pose.rotation, pose.translation + dt)
}

fn profile(d_vox: f64, beam_width: f64) -> f64 {
    if beam_width <= 0.0 {
        return if d_vox.abs() < 0.5 { 1.0 } else { 0.0 };
    }
    let sigma = beam_width / (8.0 * 2f64.ln()).sqrt();
    let u = d_vox / sigma;
    if u.abs() > 8.0 {
        0.0
    } else {
        (-0.5 * u * u).exp()
    }
}

fn apply_speckle(volume: &mut Volume, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let [nx, ny, nz] = volume.dims();
    let n = Normal::new(0.0, sigma).unwrap();
    let plane = nx * ny;
    let data = volume.data_mut();
    for z in 0..nz {
        // one stream per z-plane
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64);
        for v in &mut data[z * plane..(z + 1) * plane] {
            let x = *v as f64 * (1.0 + n.sample(&mut rng));
            *v = x.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Renders the membrane volume for one probe pose.
///
/// The membrane is displaced along its normal by a Gaussian draw of
/// `line_jitter` voxels before rendering; speckle is applied last.
pub fn render_volume(
    scene: &PhantomScene,
    pose: &RigidTransform,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Volume, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxel = scene.scale.mean();
    let jitter_mm = if noise.line_jitter > 0.0 {
        Normal::new(0.0, noise.line_jitter).unwrap().sample(&mut rng) * voxel
    } else {
        0.0
    };
    let chain = scene.chain(pose);
    let a3: Vector3<f64> = chain.rotation.row(2).transpose();
    let a34 = chain.translation.z - jitter_mm;
    let origin = scene.probe.origin_metric(&scene.scale);
    let radius = scene.probe.surface_radius;
    let ratio = scene.sos.ratio();
    let bg = noise.background_level as f64;
    let s = *scene.scale.as_vector();

    let [nx, ny, nz] = scene.dims;
    let mut volume = Volume::filled(scene.dims, scene.scale, noise.background_level)?;
    let base = a3.dot(&origin) + a34;
    let mut hits = 0usize;
    let data = volume.data_mut();
    for z in 0..nz {
        for y in 0..ny {
            let ry = y as f64 * s.y - origin.y;
            let rz = z as f64 * s.z - origin.z;
            let yz2 = ry * ry + rz * rz;
            let proj_yz = a3.y * ry + a3.z * rz;
            let row = &mut data[nx * (y + ny * z)..nx * (y + ny * z + 1)];
            for (x, v) in row.iter_mut().enumerate() {
                let rx = x as f64 * s.x - origin.x;
                let dist = (rx * rx + yz2).sqrt();
                if dist < radius {
                    continue;
                }
                // corrected point: origin + ray · (r + ratio·(dist − r)) / dist
                let f = (radius + ratio * (dist - radius)) / dist;
                let d_vox = (base + f * (a3.x * rx + proj_yz)) / voxel;
                let w = profile(d_vox, noise.beam_width);
                if w > 0.0 {
                    if d_vox.abs() < 0.5 {
                        hits += 1;
                    }
                    *v = (bg + (255.0 - bg) * w).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    if hits == 0 {
        return Err(SimError::EmptyScene);
    }
    apply_speckle(&mut volume, noise.speckle_sigma, derive_seed(seed, 1));
    Ok(volume)
}

/// Line where `plane` (metric volume space) cuts the slice of the given
/// kind at voxel index `fixed`, in slice pixel coordinates.
pub fn plane_slice_line(plane: &Plane, scale: &ScaleVector, kind: SliceKind, fixed: f64) -> Option<Line2D> {
    // plane in voxel coordinates: (n ⊙ s) · p = offset
    let nv = plane.normal().component_mul(scale.as_vector());
    let rest = plane.offset() - nv[kind.fixed_axis()] * fixed;
    let (a, b) = kind.project(&nv);
    let norm = (a * a + b * b).sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some(Line2D::new(rest / norm, b.atan2(a)))
}

/// Noise-free observation computed analytically from the scene geometry,
/// without rendering. Samples are exact membrane points.
pub fn exact_observation(scene: &PhantomScene, pose: &RigidTransform, samples_per_line: usize) -> Option<PlaneObservation> {
    let plane = scene.membrane_in_volume(pose);
    let slice_z = scene.probe.origin.z.round();
    let slice_x = scene.probe.origin.x.round();
    let [nx, ny, nz] = scene.dims;
    let mut points = Vec::new();
    let mut lines = Vec::new();
    for (kind, fixed, w, h) in [(SliceKind::Xy, slice_z, nx, ny), (SliceKind::Zy, slice_x, nz, ny)] {
        let line = plane_slice_line(&plane, &scene.scale, kind, fixed)?;
        let ((u0, v0), (u1, v1)) = line.clip(w, h)?;
        for i in 0..samples_per_line {
            let f = i as f64 / (samples_per_line - 1).max(1) as f64;
            points.push(kind.lift(u0 + f * (u1 - u0), v0 + f * (v1 - v0), fixed));
        }
        lines.push(line);
    }
    Some(PlaneObservation {
        id: String::new(),
        line_xy: lines[0],
        line_zy: lines[1],
        slice_z: slice_z as usize,
        slice_x: slice_x as usize,
        sample_points: points,
        pose: *pose,
    })
}

/// Digitized membrane-support points in phantom space: uniform over a disk
/// of `radius` mm in the membrane plane, Gaussian noise of `sigma` mm along
/// the normal.
pub fn membrane_surface_points(scene: &PhantomScene, count: usize, radius: f64, sigma: f64, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).unwrap();
    let m2ph = scene.ph2m.inverse();
    (0..count)
        .map(|_| {
            let r = radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let z = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            m2ph.apply(&Vector3::new(r * a.cos(), r * a.sin(), z))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn label(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            _ => None,
        }
    }
}

/// Two coplanar bead triangles, phantom space.
#[derive(Debug, Clone, PartialEq)]
pub struct BeadPhantom {
    /// Left triangle first, then right.
    pub beads: [Vector3<f64>; 6],
}

impl Default for BeadPhantom {
    /// Barycenters 60 mm apart, beads 10 mm from their barycenter, spanning
    /// about 80 mm.
    fn default() -> Self {
        Self::new(60.0, 10.0)
    }
}

impl BeadPhantom {
    pub fn new(barycenter_distance: f64, triangle_radius: f64) -> Self {
        let base = Vector3::new(0.0, 0.0, 50.0);
        let mut beads = [Vector3::zeros(); 6];
        for (side, sign) in [(0usize, -1.0), (1, 1.0)] {
            let center = base + Vector3::x() * (sign * barycenter_distance / 2.0);
            for k in 0..3 {
                let a = std::f64::consts::TAU * k as f64 / 3.0 + 0.3 * side as f64;
                beads[side * 3 + k] = center + Vector3::new(a.cos(), a.sin(), 0.0) * triangle_radius;
            }
        }
        Self { beads }
    }

    pub fn triangle(&self, side: Side) -> &[Vector3<f64>] {
        match side {
            Side::Left => &self.beads[..3],
            Side::Right => &self.beads[3..],
        }
    }

    pub fn barycenter(&self, side: Side) -> Vector3<f64> {
        self.triangle(side).iter().sum::<Vector3<f64>>() / 3.0
    }

    /// Distance between the triangle barycenters, mm.
    pub fn barycenter_distance(&self) -> f64 {
        (self.barycenter(Side::Left) - self.barycenter(Side::Right)).norm()
    }
}

/// One simulated bead acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct BeadVolume {
    pub volume: Volume,
    pub side: Side,
    pub true_pose: RigidTransform,
    /// True bead centers as displayed, voxel coordinates.
    pub bead_voxels: [Vector3<f64>; 3],
}

const BEAD_SIGMA_VOX: f64 = 1.2;
const BEAD_MARGIN_VOX: f64 = 4.0;

fn inside(p: &Vector3<f64>, dims: &[usize; 3], margin: f64) -> bool {
    (0..3).all(|i| p[i] >= margin && p[i] <= dims[i] as f64 - 1.0 - margin)
}

fn outside(p: &Vector3<f64>, dims: &[usize; 3], margin: f64) -> bool {
    (0..3).any(|i| p[i] < -margin || p[i] > dims[i] as f64 - 1.0 + margin)
}

/// Renders `count` bead acquisitions, alternating left and right triangle
/// (first half left). The other triangle never enters the volume.
pub fn render_bead_volumes(
    scene: &PhantomScene,
    phantom: &BeadPhantom,
    count: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<BeadVolume>, SimError> {
    let center = scene.metric_center();
    let width = scene.dims[0] as f64 * scene.scale.as_vector().x;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let side = if i < count.div_ceil(2) { Side::Left } else { Side::Right };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut placed = None;
        for _ in 0..100 {
            // phantom x runs along volume x; keep the other triangle beyond the edge
            let toward = match side {
                Side::Left => 1.0,
                Side::Right => -1.0,
            };
            let target = Vector3::new(
                center.x + toward * (0.18 * width + rng.random_range(-2.0..2.0)),
                center.y + rng.random_range(-5.0..5.0),
                center.z + rng.random_range(-5.0..5.0),
            );
            let rot = EulerPose::new(
                Vector3::new(
                    rng.random_range(-12f64..12.0).to_radians(),
                    rng.random_range(-12f64..12.0).to_radians(),
                    (-90.0 + rng.random_range(-20f64..20.0)).to_radians(),
                ),
                Vector3::zeros(),
            )
            .rotation();
            let bary = phantom.barycenter(side);
            // u2ph maps `target` onto the imaged barycenter
            let u2ph = RigidTransform::new(rot, bary - rot * target);
            let ph2u = u2ph.inverse();
            let displayed = |p: &Vector3<f64>| {
                distort_point(&scene.scale.to_voxel(&ph2u.apply(p)), &scene.scale, &scene.probe, &scene.sos).ok()
            };
            let own: Vec<_> = phantom.triangle(side).iter().map(&displayed).collect();
            let other_side = if side == Side::Left { Side::Right } else { Side::Left };
            let other: Vec<_> = phantom.triangle(other_side).iter().map(&displayed).collect();
            let ok = own.iter().all(|p| p.is_some_and(|p| inside(&p, &scene.dims, BEAD_MARGIN_VOX)))
                && other.iter().all(|p| p.is_none_or(|p| outside(&p, &scene.dims, BEAD_MARGIN_VOX)));
            if ok {
                let pose = u2ph.compose(&scene.true_u2pr.inverse());
                placed = Some((pose, [own[0].unwrap(), own[1].unwrap(), own[2].unwrap()], ph2u));
                break;
            }
        }
        let (pose, bead_voxels, ph2u) =
            placed.ok_or_else(|| SimError::Placement(format!("acquisition {i} ({})", side.label())))?;
        let truths: Vec<Vector3<f64>> = phantom.triangle(side).iter().map(|p| ph2u.apply(p)).collect();
        let volume = render_beads(scene, &truths, &bead_voxels, noise, derive_seed(seed, 1000 + i as u64))?;
        out.push(BeadVolume {
            volume,
            side,
            true_pose: pose,
            bead_voxels,
        });
    }
    Ok(out)
}

fn render_beads(
    scene: &PhantomScene,
    truths_metric: &[Vector3<f64>],
    displayed: &[Vector3<f64>; 3],
    noise: &NoiseModel,
    seed: u64,
) -> Result<Volume, SimError> {
    let mut volume = Volume::filled(scene.dims, scene.scale, noise.background_level)?;
    let bg = noise.background_level as f64;
    let sigma_mm = BEAD_SIGMA_VOX * scene.scale.mean();
    let origin = scene.probe.origin_metric(&scene.scale);
    let reach = (4.0 * BEAD_SIGMA_VOX).ceil() as i64 + 1;
    for (truth, center) in truths_metric.iter().zip(displayed) {
        let c = center.map(|v| v.round() as i64);
        for z in c.z - reach..=c.z + reach {
            for y in c.y - reach..=c.y + reach {
                for x in c.x - reach..=c.x + reach {
                    if x < 0 || y < 0 || z < 0 {
                        continue;
                    }
                    let (xu, yu, zu) = (x as usize, y as usize, z as usize);
                    if xu >= scene.dims[0] || yu >= scene.dims[1] || zu >= scene.dims[2] {
                        continue;
                    }
                    let m = scene.scale.to_metric(&Vector3::new(x as f64, y as f64, z as f64));
                    let Ok(t) = correct_metric(&m, &origin, scene.probe.surface_radius, scene.sos.ratio()) else {
                        continue;
                    };
                    let d2 = (t - truth).norm_squared();
                    let w = (-d2 / (2.0 * sigma_mm * sigma_mm)).exp();
                    let value = (bg + (255.0 - bg) * w).round().clamp(0.0, 255.0) as u8;
                    if value > volume.get(xu, yu, zu) {
                        volume.set(xu, yu, zu, value);
                    }
                }
            }
        }
    }
    apply_speckle(&mut volume, noise.speckle_sigma, seed);
    Ok(volume)
}

/// Bead localization: repeatedly take the brightest voxel, report the
/// background-subtracted intensity centroid over its 5³ neighborhood and
/// suppress a 9³ block around it.
pub fn locate_beads(volume: &Volume, count: usize, background: u8) -> Vec<Vector3<f64>> {
    let [nx, ny, nz] = volume.dims();
    let mut work = volume.data().to_vec();
    let bg = background as f64;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut found = Vec::with_capacity(count);
    for _ in 0..count {
        let (best, _) = work
            .iter()
            .enumerate()
            .fold((0usize, 0u8), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let (bx, by, bz) = (best % nx, (best / nx) % ny, best / (nx * ny));
        let (mut w_sum, mut acc) = (0.0, Vector3::zeros());
        for z in bz.saturating_sub(2)..=(bz + 2).min(nz - 1) {
            for y in by.saturating_sub(2)..=(by + 2).min(ny - 1) {
                for x in bx.saturating_sub(2)..=(bx + 2).min(nx - 1) {
                    let w = (volume.get(x, y, z) as f64 - bg).max(0.0);
                    w_sum += w;
                    acc += Vector3::new(x as f64, y as f64, z as f64) * w;
                }
            }
        }
        found.push(if w_sum > 0.0 {
            acc / w_sum
        } else {
            Vector3::new(bx as f64, by as f64, bz as f64)
        });
        for z in bz.saturating_sub(4)..=(bz + 4).min(nz - 1) {
            for y in by.saturating_sub(4)..=(by + 4).min(ny - 1) {
                for x in bx.saturating_sub(4)..=(bx + 4).min(nx - 1) {
                    work[idx(x, y, z)] = 0;
                }
            }
        }
    }
    found
}
