//! Membrane feature extraction.
//!
//! The membrane plane is recovered from its intersection lines with two
//! orthogonal slices through the probe origin (`xy` and `zy`). Each line is
//! found with an intensity-accumulating Hough transform, refined on the
//! intensity ridge, corrected for the sound-speed mismatch and sampled at
//! ten equidistant points between its extreme in-volume positions.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::geometry::{RigidTransform, ScaleVector};
use crate::sos::{correct_point, ProbeGeometry, SosContext, SosError};
use crate::volume::{Slice2D, SliceKind, Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("no pixel above the Hough threshold {0:.3}")]
    NoLineFound(f64),
    #[error("{0} slice: {1}")]
    Slice(&'static str, Box<DetectError>),
    #[error("only {0} ridge samples along the detected line")]
    TooFewRidgePoints(usize),
    #[error("line does not cross the image")]
    LineOutsideImage,
    #[error("slice lines are parallel; plane normal undefined")]
    ParallelLines,
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Line `u·cosθ + v·sinθ = ρ` in slice pixel coordinates, `θ ∈ [0, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    pub rho: f64,
    pub theta: f64,
}

impl Line2D {
    /// Normalizes `theta` into `[0, π)`, negating `rho` when it wraps.
    pub fn new(rho: f64, theta: f64) -> Self {
        let mut t = theta.rem_euclid(2.0 * PI);
        let mut r = rho;
        if t >= PI {
            t -= PI;
            r = -r;
        }
        if t >= PI {
            t = 0.0;
        }
        Line2D { rho: r, theta: t }
    }

    /// Line through `(u, v)` with direction `(du, dv)`.
    pub fn through(u: f64, v: f64, du: f64, dv: f64) -> Self {
        let theta = dv.atan2(du) + PI / 2.0;
        let rho = u * theta.cos() + v * theta.sin();
        Line2D::new(rho, theta)
    }

    pub fn normal(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    pub fn direction(&self) -> (f64, f64) {
        (-self.theta.sin(), self.theta.cos())
    }

    pub fn signed_distance(&self, u: f64, v: f64) -> f64 {
        u * self.theta.cos() + v * self.theta.sin() - self.rho
    }

    /// Foot of the perpendicular from the slice origin.
    pub fn anchor(&self) -> (f64, f64) {
        let (c, s) = self.normal();
        (self.rho * c, self.rho * s)
    }

    /// Endpoints of the segment inside `[0, width-1] × [0, height-1]`.
    pub fn clip(&self, width: usize, height: usize) -> Option<((f64, f64), (f64, f64))> {
        let (u0, v0) = self.anchor();
        let (du, dv) = self.direction();
        let (t0, t1) = clip_param(
            &[u0, v0],
            &[du, dv],
            &[(width - 1) as f64, (height - 1) as f64],
        )?;
        Some(((u0 + t0 * du, v0 + t0 * dv), (u0 + t1 * du, v0 + t1 * dv)))
    }

    /// Angle between the two lines, radians in `[0, π/2]`.
    pub fn angle_to(&self, other: &Line2D) -> f64 {
        let (a, b) = (self.direction(), other.direction());
        (a.0 * b.0 + a.1 * b.1).abs().clamp(0.0, 1.0).acos()
    }
}

/// Parameter interval of `origin + t·dir` inside the box `[0, hi_i]`.
fn clip_param(origin: &[f64], dir: &[f64], hi: &[f64]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..origin.len() {
        if dir[i].abs() < 1e-12 {
            if origin[i] < -1e-9 || origin[i] > hi[i] + 1e-9 {
                return None;
            }
            continue;
        }
        let a = (0.0 - origin[i]) / dir[i];
        let b = (hi[i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0.is_finite() && t1.is_finite() && t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Intensity histogram mode (lowest intensity on ties).
pub fn histogram_mode(img: &Slice2D) -> u8 {
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut best = 0;
    for i in 1..256 {
        if hist[i] > hist[best] {
            best = i;
        }
    }
    best as u8
}

/// `s_H = mode(I) + (max(I) − min(I)) / 3`.
pub fn hough_threshold(img: &Slice2D) -> f64 {
    let (mut lo, mut hi) = (u8::MAX, u8::MIN);
    for &p in &img.pixels {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    histogram_mode(img) as f64 + (hi as f64 - lo as f64) / 3.0
}

/// Accumulator resolution: 1 pixel in ρ, 0.5° in θ.
pub const THETA_BINS: usize = 360;
const THETA_STEP: f64 = PI / THETA_BINS as f64;

/// Intensity-weighted `(ρ, θ)` accumulator.
#[derive(Debug, Clone)]
pub struct HoughAccumulator {
    rho_max: i64,
    rho_bins: usize,
    cells: Vec<f64>,
}

impl HoughAccumulator {
    /// Adds the raw intensity of every pixel strictly above `threshold`.
    pub fn accumulate(img: &Slice2D, threshold: f64) -> Result<Self, DetectError> {
        let rho_max = ((img.width * img.width + img.height * img.height) as f64).sqrt().ceil() as i64;
        let rho_bins = (2 * rho_max + 1) as usize;
        let mut cells = vec![0.0; rho_bins * THETA_BINS];
        let trig: Vec<(f64, f64)> = (0..THETA_BINS)
            .map(|t| (t as f64 * THETA_STEP).sin_cos())
            .map(|(s, c)| (c, s))
            .collect();
        let mut any = false;
        for v in 0..img.height {
            for u in 0..img.width {
                let intensity = img.get(u, v) as f64;
                if intensity <= threshold {
                    continue;
                }
                any = true;
                for (t, &(c, s)) in trig.iter().enumerate() {
                    let rho = u as f64 * c + v as f64 * s;
                    let k = (rho.round() as i64 + rho_max) as usize;
                    cells[t * rho_bins + k] += intensity;
                }
            }
        }
        if !any {
            return Err(DetectError::NoLineFound(threshold));
        }
        Ok(Self {
            rho_max,
            rho_bins,
            cells,
        })
    }

    fn at(&self, rho_index: usize, theta_index: usize) -> f64 {
        self.cells[theta_index * self.rho_bins + rho_index]
    }

    /// `(rho_index, theta_index)` of the maximal cell; lowest index on ties.
    pub fn peak_cell(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &c) in self.cells.iter().enumerate() {
            if c > self.cells[best] {
                best = i;
            }
        }
        (best % self.rho_bins, best / self.rho_bins)
    }

    pub fn cell_line(&self, rho_index: usize, theta_index: usize) -> Line2D {
        Line2D::new(
            rho_index as f64 - self.rho_max as f64,
            theta_index as f64 * THETA_STEP,
        )
    }

    /// Peak refined by the weighted centroid of its 3×3 cell neighborhood.
    /// Neighbors across θ = 0/π wrap onto the cell with negated ρ.
    pub fn refined_peak(&self) -> Line2D {
        let (k, t) = self.peak_cell();
        let rho_c = k as f64 - self.rho_max as f64;
        let theta_c = t as f64 * THETA_STEP;
        let (mut w_sum, mut rho_sum, mut theta_sum) = (0.0, 0.0, 0.0);
        for dt in -1i64..=1 {
            let mut ti = t as i64 + dt;
            let mut flip = false;
            if ti < 0 {
                ti += THETA_BINS as i64;
                flip = true;
            } else if ti >= THETA_BINS as i64 {
                ti -= THETA_BINS as i64;
                flip = true;
            }
            for dr in -1i64..=1 {
                let rho = rho_c + dr as f64;
                let stored = if flip { -rho } else { rho };
                let ki = stored as i64 + self.rho_max;
                if ki < 0 || ki >= self.rho_bins as i64 {
                    continue;
                }
                let w = self.at(ki as usize, ti as usize);
                w_sum += w;
                rho_sum += w * rho;
                theta_sum += w * (theta_c + dt as f64 * THETA_STEP);
            }
        }
        Line2D::new(rho_sum / w_sum, theta_sum / w_sum)
    }
}

/// Strongest line of `img` among pixels brighter than `threshold`.
pub fn hough_lines(img: &Slice2D, threshold: f64) -> Result<Line2D, DetectError> {
    Ok(HoughAccumulator::accumulate(img, threshold)?.refined_peak())
}

/// Sub-pixel ridge positions along `coarse`.
///
/// For every column (or row, when the line is steep) the background-subtracted
/// intensity centroid is taken over a window recentered on the ridge until
/// it settles. Windows whose maximum does not exceed `threshold` are skipped.
pub fn ridge_points(img: &Slice2D, coarse: &Line2D, threshold: f64, half_window: usize) -> Vec<(f64, f64)> {
    let background = histogram_mode(img) as f64;
    let (c, s) = coarse.normal();
    let by_column = s.abs() >= c.abs();
    let (n_outer, n_inner) = if by_column {
        (img.width, img.height)
    } else {
        (img.height, img.width)
    };
    let sample = |outer: usize, inner: usize| -> f64 {
        if by_column {
            img.get(outer, inner) as f64
        } else {
            img.get(inner, outer) as f64
        }
    };
    let hw = half_window as f64;
    let mut out = Vec::new();
    for outer in 0..n_outer {
        let o = outer as f64;
        let mut center = if by_column {
            (coarse.rho - o * c) / s
        } else {
            (coarse.rho - o * s) / c
        };
        let mut ok = false;
        for _ in 0..4 {
            let lo = (center - hw).round().max(0.0) as i64;
            let hi = (center + hw).round().min(n_inner as f64 - 1.0) as i64;
            if hi - lo < 2 {
                ok = false;
                break;
            }
            let (mut w_sum, mut m_sum, mut peak) = (0.0, 0.0, 0.0f64);
            for i in lo..=hi {
                let value = sample(outer, i as usize);
                peak = peak.max(value);
                let w = (value - background).max(0.0);
                w_sum += w;
                m_sum += w * i as f64;
            }
            if peak <= threshold || w_sum <= 0.0 {
                ok = false;
                break;
            }
            let next = m_sum / w_sum;
            // the window must not be cut by the image border
            ok = lo as f64 <= next - hw + 0.5 && next + hw - 0.5 <= hi as f64;
            let settled = (next - center).abs() < 1e-9;
            center = next;
            if settled {
                break;
            }
        }
        if ok {
            out.push(if by_column { (o, center) } else { (center, o) });
        }
    }
    out
}

/// Hough seed refined by a robust fit through the sub-pixel ridge.
pub fn detect_line(img: &Slice2D, threshold: f64, half_window: usize) -> Result<Line2D, DetectError> {
    let coarse = hough_lines(img, threshold)?;
    let ridge = ridge_points(img, &coarse, threshold, half_window);
    let points: Vec<Vector3<f64>> = ridge.iter().map(|&(u, v)| Vector3::new(u, v, 0.0)).collect();
    match robust_line_3d(&points) {
        Some((c, d)) if points.len() >= 3 => Ok(Line2D::through(c.x, c.y, d.x, d.y)),
        _ => Ok(coarse),
    }
}

/// 3-D line through `points`: centroid and principal direction.
fn fit_line_3d(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if points.len() < 2 {
        return None;
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let imax = eig.eigenvalues.imax();
    if !(eig.eigenvalues[imax] > 0.0) {
        return None;
    }
    Some((centroid, eig.eigenvectors.column(imax).into_owned()))
}

fn distance_to_line(p: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    (p - c).cross(d).norm()
}

/// Fit with one pass of residual-based rejection.
fn robust_line_3d(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let (c, d) = fit_line_3d(points)?;
    let mut dist: Vec<f64> = points.iter().map(|p| distance_to_line(p, &c, &d)).collect();
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let cutoff = (4.0 * 1.4826 * med).max(0.25);
    let kept: Vec<Vector3<f64>> = points
        .iter()
        .zip(dist.iter_mut())
        .filter(|(_, d)| **d <= cutoff)
        .map(|(p, _)| *p)
        .collect();
    if kept.len() == points.len() {
        return Some((c, d));
    }
    fit_line_3d(&kept)
}

/// Tunables of [`extract_plane`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub samples_per_line: usize,
    /// Half window of the ridge centroid, pixels.
    pub ridge_half_window: usize,
    pub min_ridge_points: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            samples_per_line: 10,
            ridge_half_window: 6,
            min_ridge_points: 20,
        }
    }
}

/// Membrane evidence from one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneObservation {
    pub id: String,
    /// Corrected intersection line in the `xy` slice, pixel coordinates.
    pub line_xy: Line2D,
    /// Corrected intersection line in the `zy` slice, pixel coordinates.
    pub line_zy: Line2D,
    /// Voxel index of the `xy` slice along z.
    pub slice_z: usize,
    /// Voxel index of the `zy` slice along x.
    pub slice_x: usize,
    /// Sound-speed corrected voxel positions; `xy` samples first.
    pub sample_points: Vec<Vector3<f64>>,
    /// Probe pose `T_Pr2Ph` at acquisition.
    pub pose: RigidTransform,
}

impl PlaneObservation {
    pub fn with_pose(mut self, pose: RigidTransform) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn line(&self, kind: SliceKind) -> &Line2D {
        match kind {
            SliceKind::Xy => &self.line_xy,
            SliceKind::Zy => &self.line_zy,
        }
    }

    pub fn slice_index(&self, kind: SliceKind) -> usize {
        match kind {
            SliceKind::Xy => self.slice_z,
            SliceKind::Zy => self.slice_x,
        }
    }
}

struct SliceLine {
    line: Line2D,
    samples: Vec<Vector3<f64>>,
}

fn sample_segment(c: &Vector3<f64>, d: &Vector3<f64>, t0: f64, t1: f64, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            c + d * (t0 + f * (t1 - t0))
        })
        .collect()
}

fn volume_box(volume: &Volume) -> [f64; 3] {
    let [nx, ny, nz] = volume.dims();
    [(nx - 1) as f64, (ny - 1) as f64, (nz - 1) as f64]
}

fn detect_in_slice(
    volume: &Volume,
    slice: &Slice2D,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
    opts: &ExtractOptions,
) -> Result<SliceLine, DetectError> {
    let threshold = hough_threshold(slice);
    let coarse = hough_lines(slice, threshold)?;
    let ridge = ridge_points(slice, &coarse, threshold, opts.ridge_half_window);
    if ridge.len() < opts.min_ridge_points {
        return Err(DetectError::TooFewRidgePoints(ridge.len()));
    }
    let scale = volume.scale();
    let corrected: Vec<Vector3<f64>> = ridge
        .iter()
        .map(|&(u, v)| correct_point(&slice.kind.lift(u, v, slice.fixed as f64), scale, geometry, ctx))
        .collect::<Result<_, _>>()?;
    let (c, d) = robust_line_3d(&corrected).ok_or(DetectError::TooFewRidgePoints(corrected.len()))?;
    let (t0, t1) = clip_param(c.as_slice(), d.as_slice(), &volume_box(volume))
        .ok_or(DetectError::LineOutsideImage)?;
    let (u, v) = slice.kind.project(&c);
    let (du, dv) = slice.kind.project(&d);
    Ok(SliceLine {
        line: Line2D::through(u, v, du, dv),
        samples: sample_segment(&c, &d, t0, t1, opts.samples_per_line),
    })
}

/// Operator-supplied line in displayed slice coordinates; sampled without
/// ridge refinement.
fn manual_slice_line(
    volume: &Volume,
    slice: &Slice2D,
    line: &Line2D,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
    opts: &ExtractOptions,
) -> Result<SliceLine, DetectError> {
    let ((u0, v0), (u1, v1)) = line
        .clip(slice.width, slice.height)
        .ok_or(DetectError::LineOutsideImage)?;
    let n = opts.samples_per_line;
    let samples: Vec<Vector3<f64>> = (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1).max(1) as f64;
            let p = slice
                .kind
                .lift(u0 + f * (u1 - u0), v0 + f * (v1 - v0), slice.fixed as f64);
            correct_point(&p, volume.scale(), geometry, ctx)
        })
        .collect::<Result<_, _>>()?;
    let (a, b) = (slice.kind.project(&samples[0]), slice.kind.project(&samples[n - 1]));
    Ok(SliceLine {
        line: Line2D::through(a.0, a.1, b.0 - a.0, b.1 - a.1),
        samples,
    })
}

/// Manual replacements for failed detections.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LineOverrides {
    pub xy: Option<Line2D>,
    pub zy: Option<Line2D>,
}

/// Extracts the membrane from the `xy` and `zy` slices through the probe
/// origin. The returned observation carries an identity pose.
pub fn extract_plane(
    volume: &Volume,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
) -> Result<PlaneObservation, DetectError> {
    extract_plane_with(volume, geometry, ctx, &LineOverrides::default(), &ExtractOptions::default())
}

pub fn extract_plane_with(
    volume: &Volume,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
    overrides: &LineOverrides,
    opts: &ExtractOptions,
) -> Result<PlaneObservation, DetectError> {
    let run = |kind: SliceKind, manual: Option<Line2D>| -> Result<SliceLine, DetectError> {
        let slice = volume.slice(kind, &geometry.origin)?;
        let res = match manual {
            Some(line) => manual_slice_line(volume, &slice, &line, geometry, ctx, opts),
            None => detect_in_slice(volume, &slice, geometry, ctx, opts),
        };
        res.map_err(|e| DetectError::Slice(kind.label(), Box::new(e)))
    };
    let xy = run(SliceKind::Xy, overrides.xy)?;
    let zy = run(SliceKind::Zy, overrides.zy)?;
    let slice_z = geometry.origin.z.round() as usize;
    let slice_x = geometry.origin.x.round() as usize;
    let mut sample_points = xy.samples;
    sample_points.extend(zy.samples);
    Ok(PlaneObservation {
        id: String::new(),
        line_xy: xy.line,
        line_zy: zy.line,
        slice_z,
        slice_x,
        sample_points,
        pose: RigidTransform::identity(),
    })
}

/// Direction of a slice line lifted into metric volume space.
pub fn lifted_direction(kind: SliceKind, line: &Line2D, scale: &ScaleVector) -> Vector3<f64> {
    let (du, dv) = line.direction();
    scale.to_metric(&kind.lift(du, dv, 0.0)).normalize()
}

/// Unit normal of the observed plane, metric volume space: the normalized
/// cross product of the two lifted line directions.
pub fn plane_normal_from_lines(obs: &PlaneObservation, scale: &ScaleVector) -> Result<Vector3<f64>, DetectError> {
    let a = lifted_direction(SliceKind::Xy, &obs.line_xy, scale);
    let b = lifted_direction(SliceKind::Zy, &obs.line_zy, scale);
    let n = a.cross(&b);
    if n.norm() < 1e-9 {
        return Err(DetectError::ParallelLines);
    }
    Ok(n.normalize())
}
