//! Speed of sound in water and sectorial-probe distance correction.
//!
//! The scanner converts echo times to distances assuming the tissue sound
//! speed `v_tissue`. Imaging a water phantom therefore stretches every point
//! radially about the probe origin `O_US`: the distance beyond the scan-head
//! surface `d_W` is rescaled to `d_T = (v_tissue / v_water) · d_W` along the
//! ray through `O_US`.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::ScaleVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("temperature {0} °C outside the polynomial validity range [0, 74] °C")]
    TemperatureOutOfRange(f64),
    #[error("sound speed {0} m/s outside (1300, 1700) m/s")]
    SpeedOutOfRange(f64),
    #[error("point lies {0:.6} mm from the probe origin, inside the scan-head radius {1:.6} mm")]
    InsideScanHead(f64, f64),
    #[error("point coincides with the probe origin; correction ray undefined")]
    UndefinedRay,
    #[error("invalid probe geometry: {0}")]
    InvalidGeometry(String),
}

/// Default scanner sound speed, m/s.
pub const TISSUE_SOS: f64 = 1540.0;

/// Degree-5 polynomial for the speed of sound in pure water (Bilaniuk & Wong,
/// J. Acoust. Soc. Am. 93 (1993) 1609, erratum 99 (1996) 3257), 36-point
/// set, `c(t) = Σ k_i t^i` with `t` in °C.
const BILANIUK_WONG: [f64; 6] = [
    1.402_387_44e3,
    5.038_361_71,
    -5.811_729_16e-2,
    3.346_381_17e-4,
    -1.482_596_72e-6,
    3.165_850_20e-9,
];

pub const WATER_TEMPERATURE_RANGE: (f64, f64) = (0.0, 74.0);

/// Speed of sound in pure water at `temperature` °C, m/s.
pub fn water_sos(temperature: f64) -> Result<f64, SosError> {
    let (lo, hi) = WATER_TEMPERATURE_RANGE;
    if !(lo..=hi).contains(&temperature) {
        return Err(SosError::TemperatureOutOfRange(temperature));
    }
    Ok(BILANIUK_WONG
        .iter()
        .rev()
        .fold(0.0, |acc, k| acc * temperature + k))
}

/// Sectorial probe: origin in voxel coordinates and scan-head surface radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeGeometry {
    pub origin: Vector3<f64>,
    pub surface_radius: f64,
}

impl ProbeGeometry {
    pub fn new(origin: Vector3<f64>, surface_radius: f64) -> Result<Self, SosError> {
        if !(surface_radius >= 0.0) || !surface_radius.is_finite() {
            return Err(SosError::InvalidGeometry(format!("surface radius {surface_radius}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(SosError::InvalidGeometry("non-finite origin".into()));
        }
        Ok(Self {
            origin,
            surface_radius,
        })
    }

    pub fn origin_metric(&self, scale: &ScaleVector) -> Vector3<f64> {
        scale.to_metric(&self.origin)
    }
}

/// Sound speeds in effect for one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SosContext {
    pub v_tissue: f64,
    pub v_water: f64,
    pub temperature: f64,
}

fn check_speed(v: f64) -> Result<f64, SosError> {
    if v > 1300.0 && v < 1700.0 {
        Ok(v)
    } else {
        Err(SosError::SpeedOutOfRange(v))
    }
}

impl SosContext {
    /// Water speed derived from `temperature`.
    pub fn from_temperature(temperature: f64, v_tissue: f64) -> Result<Self, SosError> {
        Ok(Self {
            v_tissue: check_speed(v_tissue)?,
            v_water: check_speed(water_sos(temperature)?)?,
            temperature,
        })
    }

    /// Explicit speeds; `temperature` is informational only.
    pub fn with_speeds(v_tissue: f64, v_water: f64, temperature: f64) -> Result<Self, SosError> {
        Ok(Self {
            v_tissue: check_speed(v_tissue)?,
            v_water: check_speed(v_water)?,
            temperature,
        })
    }

    /// `v_tissue / v_water`.
    pub fn ratio(&self) -> f64 {
        self.v_tissue / self.v_water
    }

    /// The context whose correction undoes this one.
    pub fn inverted(&self) -> SosContext {
        SosContext {
            v_tissue: self.v_water,
            v_water: self.v_tissue,
            temperature: self.temperature,
        }
    }
}

/// Rescales the distance beyond the scan-head surface by `ratio` along the
/// ray from the probe origin. Works in millimeters.
pub fn correct_metric(
    point: &Vector3<f64>,
    origin: &Vector3<f64>,
    surface_radius: f64,
    ratio: f64,
) -> Result<Vector3<f64>, SosError> {
    let ray = point - origin;
    let dist = ray.norm();
    if dist == 0.0 {
        return Err(SosError::UndefinedRay);
    }
    // tolerate round-off for points sitting on the surface
    if dist < surface_radius * (1.0 - 1e-12) {
        return Err(SosError::InsideScanHead(dist, surface_radius));
    }
    let d_water = (dist - surface_radius).max(0.0);
    if d_water == 0.0 {
        return Ok(*point);
    }
    let d_tissue = ratio * d_water;
    Ok(origin + ray * ((surface_radius + d_tissue) / dist))
}

/// Speed-of-sound correction of a voxel position.
pub fn correct_point(
    voxel: &Vector3<f64>,
    scale: &ScaleVector,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
) -> Result<Vector3<f64>, SosError> {
    let corrected = correct_metric(
        &scale.to_metric(voxel),
        &geometry.origin_metric(scale),
        geometry.surface_radius,
        ctx.ratio(),
    )?;
    Ok(scale.to_voxel(&corrected))
}

/// Inverse of [`correct_point`]: where a true (corrected) voxel position is
/// displayed by the scanner.
pub fn distort_point(
    voxel: &Vector3<f64>,
    scale: &ScaleVector,
    geometry: &ProbeGeometry,
    ctx: &SosContext,
) -> Result<Vector3<f64>, SosError> {
    correct_point(voxel, scale, geometry, &ctx.inverted())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit() -> ScaleVector {
        ScaleVector::isotropic(1.0).unwrap()
    }

    #[test]
    fn water_sos_at_experiment_temperature() {
        let v = water_sos(23.0).unwrap();
        assert!((v - 1491.5).abs() < 0.5, "{v}");
        // value of the polynomial itself
        assert_abs_diff_eq!(v, 1491.203, epsilon = 1e-3);
    }

    #[test]
    fn water_sos_increasing_below_40() {
        let samples: Vec<f64> = (0..=80).map(|i| water_sos(i as f64 * 0.5).unwrap()).collect();
        assert!(samples.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn water_sos_range_check() {
        assert!(matches!(water_sos(-0.1), Err(SosError::TemperatureOutOfRange(_))));
        assert!(matches!(water_sos(74.5), Err(SosError::TemperatureOutOfRange(_))));
        assert!(water_sos(0.0).is_ok() && water_sos(74.0).is_ok());
    }

    #[test]
    fn context_validation() {
        assert!(SosContext::with_speeds(1200.0, 1480.0, 20.0).is_err());
        assert!(SosContext::with_speeds(1540.0, 1800.0, 20.0).is_err());
        let ctx = SosContext::from_temperature(23.0, TISSUE_SOS).unwrap();
        assert!(ctx.ratio() > 1.0);
    }

    #[test]
    fn equal_speeds_leave_point_unchanged() {
        let g = ProbeGeometry::new(Vector3::new(0.0, -20.0, 0.0), 5.0).unwrap();
        let ctx = SosContext::with_speeds(1500.0, 1500.0, 20.0).unwrap();
        let p = Vector3::new(3.0, 40.0, -2.0);
        assert_abs_diff_eq!(correct_point(&p, &unit(), &g, &ctx).unwrap(), p, epsilon = 1e-12);
    }

    #[test]
    fn ten_mm_in_water_becomes_10_405() {
        // d_T = 1540/1480 · 10 = 10.4054...
        let g = ProbeGeometry::new(Vector3::zeros(), 20.0).unwrap();
        let ctx = SosContext::with_speeds(1540.0, 1480.0, 20.0).unwrap();
        let p = Vector3::new(0.0, 30.0, 0.0);
        let c = correct_point(&p, &unit(), &g, &ctx).unwrap();
        assert_abs_diff_eq!(c.y - 20.0, 1540.0 / 1480.0 * 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y - p.y, 0.405, epsilon = 1e-3);
    }

    #[test]
    fn surface_point_is_fixed() {
        let g = ProbeGeometry::new(Vector3::zeros(), 20.0).unwrap();
        let ctx = SosContext::with_speeds(1540.0, 1400.0, 20.0).unwrap();
        let p = Vector3::new(12.0, 16.0, 0.0);
        assert_eq!(correct_point(&p, &unit(), &g, &ctx).unwrap(), p);
    }

    #[test]
    fn error_paths() {
        let g = ProbeGeometry::new(Vector3::new(1.0, 1.0, 1.0), 20.0).unwrap();
        let ctx = SosContext::with_speeds(1540.0, 1480.0, 20.0).unwrap();
        assert_eq!(
            correct_point(&Vector3::new(1.0, 1.0, 1.0), &unit(), &g, &ctx),
            Err(SosError::UndefinedRay)
        );
        assert!(matches!(
            correct_point(&Vector3::new(1.0, 10.0, 1.0), &unit(), &g, &ctx),
            Err(SosError::InsideScanHead(..))
        ));
        assert!(ProbeGeometry::new(Vector3::zeros(), -1.0).is_err());
    }

    #[test]
    fn anisotropic_scale_works_in_millimeters() {
        let s = ScaleVector::new(0.5, 0.25, 1.0).unwrap();
        let g = ProbeGeometry::new(Vector3::new(0.0, 0.0, 0.0), 0.0).unwrap();
        let ctx = SosContext::with_speeds(1600.0, 1400.0, 20.0).unwrap();
        let p = Vector3::new(10.0, 40.0, 5.0);
        // zero radius: pure homothety about the origin, identical in voxel space
        let c = correct_point(&p, &s, &g, &ctx).unwrap();
        assert_abs_diff_eq!(c, p * (1600.0 / 1400.0), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn correction_preserves_ray_monotone_and_inverts(
            ox in -20f64..20.0, oy in -60f64..-20.0, oz in -20f64..20.0,
            r in 0f64..15.0,
            dx in -1f64..1.0, dz in -1f64..1.0,
            d1 in 0.1f64..80.0, gap in 0.1f64..40.0,
            vw in 1400f64..1560.0,
        ) {
            let s = ScaleVector::new(0.477, 0.4, 0.5).unwrap();
            let g = ProbeGeometry::new(Vector3::new(ox, oy, oz), r).unwrap();
            let ctx = SosContext::with_speeds(TISSUE_SOS, vw, 20.0).unwrap();
            let o = g.origin_metric(&s);
            let dir = Vector3::new(dx, 1.0, dz).normalize();
            let p1 = s.to_voxel(&(o + dir * (r + d1)));
            let p2 = s.to_voxel(&(o + dir * (r + d1 + gap)));
            let c1 = correct_point(&p1, &s, &g, &ctx).unwrap();
            let c2 = correct_point(&p2, &s, &g, &ctx).unwrap();
            // collinear with the origin
            let m1 = s.to_metric(&c1) - o;
            prop_assert!(m1.cross(&dir).norm() < 1e-9);
            // monotone along the ray
            prop_assert!((s.to_metric(&c1) - o).norm() < (s.to_metric(&c2) - o).norm());
            // ratio k followed by 1/k restores the point
            let back = distort_point(&c1, &s, &g, &ctx).unwrap();
            prop_assert!((back - p1).norm() < 1e-9);
        }
    }
}
