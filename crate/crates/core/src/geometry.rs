//! Rigid-transform algebra, Euler parameterization, planes and the membrane
//! pre-calibration fit.
//!
//! Frames follow the calibration chain
//! `membrane <- phantom <- probe <- ultrasound volume`:
//!
//! * `T_Ph2M` maps phantom-tracker coordinates into membrane space, where the
//!   membrane is the `z = 0` plane.
//! * `T_Pr2Ph` is the probe rigid-body pose reported by the tracker.
//! * `T_U2Pr` is the unknown calibration from scaled voxel coordinates into
//!   the probe rigid-body frame.
//!
//! All lengths are millimeters, all angles radians.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid scale vector ({0}, {1}, {2}): components must be > 0")]
    InvalidScale(f64, f64, f64),
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
}

/// Homogeneous rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(*rot.matrix(), Vector3::zeros())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a transform from a homogeneous matrix, checking that the
    /// rotation block is orthonormal with determinant +1 within `tol`.
    pub fn from_matrix4(m: &Matrix4<f64>, tol: f64) -> Result<Self, GeometryError> {
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        let t = RigidTransform::new(rotation, translation);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > tol {
            return Err(GeometryError::NotRigid(format!("bottom row {bottom:?}")));
        }
        t.check_rigid(tol)?;
        Ok(t)
    }

    pub fn check_rigid(&self, tol: f64) -> Result<(), GeometryError> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > tol {
            return Err(GeometryError::NotRigid(format!("RᵀR deviates by {err:e}")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(GeometryError::NotRigid(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// Re-orthonormalizes the rotation block (polar decomposition).
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidTransform::new(r, self.translation)
    }

    /// Angle of the relative rotation `self⁻¹ ∘ other`, radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Six-parameter pose: intrinsic Z-Y-X Euler angles plus translation.
///
/// `angles = [yaw, pitch, roll]` and `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerPose {
    pub angles: Vector3<f64>,
    pub translation: Vector3<f64>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl EulerPose {
    pub fn new(angles: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            angles,
            translation,
        }
    }

    /// Packs as `[yaw, pitch, roll, tx, ty, tz]`.
    pub fn to_params(&self) -> [f64; 6] {
        [
            self.angles.x,
            self.angles.y,
            self.angles.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::new(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.angles.x) * rot_y(self.angles.y) * rot_x(self.angles.z)
    }

    /// Partial derivatives of the rotation matrix w.r.t. yaw, pitch, roll.
    pub fn rotation_derivatives(&self) -> [Matrix3<f64>; 3] {
        let (y, p, r) = (self.angles.x, self.angles.y, self.angles.z);
        [
            d_rot_z(y) * rot_y(p) * rot_x(r),
            rot_z(y) * d_rot_y(p) * rot_x(r),
            rot_z(y) * rot_y(p) * d_rot_x(r),
        ]
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation(), self.translation)
    }

    /// Inverse of [`EulerPose::to_transform`], with pitch in `[-π/2, π/2]`.
    /// At gimbal lock (|pitch| = π/2) roll is set to zero.
    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = &t.rotation;
        let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        let (yaw, roll) = if sp.abs() < 1.0 - 1e-12 {
            (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
        } else {
            ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
        };
        Self::new(Vector3::new(yaw, pitch, roll), t.translation)
    }
}

/// Per-axis voxel size, millimeters per voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleVector(Vector3<f64>);

impl ScaleVector {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self, GeometryError> {
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0) || !(sx.is_finite() && sy.is_finite() && sz.is_finite())
        {
            return Err(GeometryError::InvalidScale(sx, sy, sz));
        }
        Ok(Self(Vector3::new(sx, sy, sz)))
    }

    pub fn isotropic(s: f64) -> Result<Self, GeometryError> {
        Self::new(s, s, s)
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// Voxel coordinates to millimeters.
    pub fn to_metric(&self, voxel: &Vector3<f64>) -> Vector3<f64> {
        voxel.component_mul(&self.0)
    }

    pub fn to_voxel(&self, metric: &Vector3<f64>) -> Vector3<f64> {
        metric.component_div(&self.0)
    }

    /// Geometric mean voxel size; equals the side length for isotropic voxels.
    pub fn mean(&self) -> f64 {
        (self.0.x * self.0.y * self.0.z).cbrt()
    }
}

/// Maps a scaled voxel through `T_Ph2M · T_Pr2Ph · T_U2Pr` into membrane
/// space. For a membrane point the returned z-component is zero.
pub fn apply_chain(
    ph2m: &RigidTransform,
    pr2ph: &RigidTransform,
    u2pr: &RigidTransform,
    scale: &ScaleVector,
    voxel: &Vector3<f64>,
) -> Vector3<f64> {
    ph2m.apply(&pr2ph.apply(&u2pr.apply(&scale.to_metric(voxel))))
}

/// Oriented plane `{p : normal · p = offset}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

const PLANE_TIE_EPS: f64 = 1e-12;

impl Plane {
    /// Normalizes `normal` and canonicalizes the sign so that `offset >= 0`
    /// (ties at zero offset keep the lexicographically larger normal).
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !(n > 1e-300) || !n.is_finite() || !offset.is_finite() {
            return Err(GeometryError::Degenerate("zero or non-finite plane normal".into()));
        }
        let (normal, offset) = (normal / n, offset / n);
        let flip = if offset.abs() <= PLANE_TIE_EPS {
            lexicographic_less(&normal, &-normal)
        } else {
            offset < 0.0
        };
        Ok(if flip {
            Plane {
                normal: -normal,
                offset: -offset,
            }
        } else {
            Plane { normal, offset }
        })
    }

    pub fn from_point_normal(point: &Vector3<f64>, normal: &Vector3<f64>) -> Result<Self, GeometryError> {
        let n = normal.normalize();
        Self::new(n, n.dot(point))
    }

    /// The `z = 0` plane.
    pub fn xy() -> Self {
        Plane {
            normal: Vector3::z(),
            offset: 0.0,
        }
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * self.signed_distance(p)
    }

    /// Image of this plane under `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Plane {
        let n = t.apply_vector(&self.normal);
        let offset = self.offset + n.dot(&t.translation);
        // rotation preserves unit length; only the sign canonicalization can change
        Plane::new(n, offset).expect("rigid image of a valid plane is valid")
    }

    /// Angle between the two normals ignoring orientation, radians.
    pub fn angle_to(&self, other: &Plane) -> f64 {
        let cross = self.normal.cross(&other.normal).norm();
        cross.atan2(self.normal.dot(&other.normal).abs())
    }
}

fn lexicographic_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for i in 0..3 {
        if a[i] < b[i] {
            return true;
        }
        if a[i] > b[i] {
            return false;
        }
    }
    false
}

/// Output of [`fit_plane_robust`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    /// RMS signed distance of the inliers, mm.
    pub rms: f64,
    /// Per input point: `true` when it kept a non-zero biweight.
    pub inliers: Vec<bool>,
}

impl PlaneFit {
    pub fn outlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| !b).count()
    }
}

const IRLS_ITERATIONS: usize = 10;
const TUKEY_MAD_FACTOR: f64 = 3.0;

/// Weighted total-least-squares plane: weighted centroid and the eigenvector
/// of the smallest eigenvalue of the weighted scatter matrix.
fn weighted_plane(points: &[Vector3<f64>], weights: &[f64]) -> Result<Plane, GeometryError> {
    let wsum: f64 = weights.iter().sum();
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active < 3 || !(wsum > 0.0) {
        return Err(GeometryError::Degenerate(format!(
            "plane fit needs at least 3 weighted points, got {active}"
        )));
    }
    let centroid = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (p, &w)| acc + p * w)
        / wsum;
    let mut scatter = Matrix3::zeros();
    for (p, &w) in points.iter().zip(weights) {
        let d = p - centroid;
        scatter += d * d.transpose() * w;
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lmin, lmid, lmax) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(lmax > 0.0) || lmid <= lmax * 1e-12 {
        return Err(GeometryError::Degenerate("points are collinear or coincident".into()));
    }
    let _ = lmin;
    let normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    Plane::from_point_normal(&centroid, &normal)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares plane followed by Tukey-biweight reweighting.
///
/// The biweight cutoff is `3 × MAD` of the current residuals, re-estimated on
/// each of 10 iterations. Points beyond the cutoff get weight zero and are
/// reported as outliers.
pub fn fit_plane_robust(points: &[Vector3<f64>]) -> Result<PlaneFit, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut weights = vec![1.0; points.len()];
    let mut plane = weighted_plane(points, &weights)?;
    // cutoff never collapses below this, so exact inputs keep unit weights
    let extent = points.iter().map(|p| p.amax()).fold(0.0, f64::max).max(1.0);
    let floor = 1e-9 * extent;
    // residuals are centered on their median: the least-squares start sits
    // between inliers and outliers
    let spread = |plane: &Plane| {
        let residuals: Vec<f64> = points.iter().map(|p| plane.signed_distance(p)).collect();
        let mut scratch = residuals.clone();
        let med = median(&mut scratch);
        let mut dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
        let cutoff = (TUKEY_MAD_FACTOR * median(&mut dev)).max(floor);
        (residuals, med, cutoff)
    };

    for _ in 0..IRLS_ITERATIONS {
        let (residuals, med, cutoff) = spread(&plane);
        for (w, r) in weights.iter_mut().zip(&residuals) {
            let u = (r - med) / cutoff;
            *w = if u.abs() < 1.0 { (1.0 - u * u).powi(2) } else { 0.0 };
        }
        match weighted_plane(points, &weights) {
            Ok(p) => plane = p,
            // too few survivors: keep the previous estimate
            Err(_) => break,
        }
    }

    let (residuals, med, cutoff) = spread(&plane);
    let inliers: Vec<bool> = residuals.iter().map(|r| (r - med).abs() < cutoff).collect();
    let (sum, count) = points
        .iter()
        .zip(&inliers)
        .filter(|(_, &i)| i)
        .fold((0.0, 0usize), |(s, c), (p, _)| (s + plane.signed_distance(p).powi(2), c + 1));
    let rms = if count > 0 { (sum / count as f64).sqrt() } else { 0.0 };
    Ok(PlaneFit {
        plane,
        rms,
        inliers,
    })
}

/// Builds the phantom-to-membrane transform for a plane given in phantom
/// coordinates. The membrane z-axis is the plane normal, the x-axis is the
/// projection of phantom `e_x` onto the plane (phantom `e_y` if `e_x` is
/// nearly normal to it) and the origin is the projection of the phantom
/// origin.
pub fn membrane_frame(plane: &Plane) -> RigidTransform {
    let z = *plane.normal();
    let mut x = Vector3::x() - z * z.x;
    if x.norm() < 1e-6 {
        x = Vector3::y() - z * z.y;
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let origin = z * plane.offset();
    RigidTransform::new(rotation, -(rotation * origin))
}

/// Result of [`precalibrate_membrane`].
#[derive(Debug, Clone, PartialEq)]
pub struct Precalibration {
    pub ph2m: RigidTransform,
    pub fit: PlaneFit,
}

impl Precalibration {
    pub fn rms(&self) -> f64 {
        self.fit.rms
    }
}

/// Locates the membrane plane from digitized surface points in phantom space.
pub fn precalibrate_membrane(surface_points: &[Vector3<f64>]) -> Result<Precalibration, GeometryError> {
    let fit = fit_plane_robust(surface_points)?;
    Ok(Precalibration {
        ph2m: membrane_frame(&fit.plane),
        fit,
    })
}
