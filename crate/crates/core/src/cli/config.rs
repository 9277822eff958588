//! Flat `key = value` configuration. `#` starts a comment; unknown keys are
//! rejected so typos surface early.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::detect::{ExtractOptions, Line2D, LineOverrides};
use crate::geometry::{EulerPose, RigidTransform, ScaleVector};
use crate::metrics::Pairing;
use crate::sim::{BeadPhantom, NoiseModel, PhantomScene};
use crate::solver::SolverConfig;
use crate::sos::{ProbeGeometry, SosContext, TISSUE_SOS};

use super::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub dims: [usize; 3],
    pub scale: ScaleVector,
    pub probe_origin: Vector3<f64>,
    pub probe_radius: f64,
    pub temperature: f64,
    pub v_tissue: f64,
    /// Ground-truth `T_U2Pr` for simulation, Euler degrees then mm.
    pub true_u2pr: [f64; 6],
    /// Ground-truth `T_Ph2M` for simulation, Euler degrees then mm.
    pub ph2m: [f64; 6],
    pub noise: NoiseModel,
    pub degenerate: bool,
    pub beads: bool,
    pub bead_count: usize,
    pub bead_distance: f64,
    pub bead_radius: f64,
    pub membrane_points: usize,
    pub membrane_sigma: f64,
    pub solver: SolverConfig,
    pub extract: ExtractOptions,
    pub pairing: Pairing,
    /// Keyed by volume id.
    pub manual_lines: BTreeMap<String, LineOverrides>,
}

fn euler_params(t: &RigidTransform) -> [f64; 6] {
    let p = EulerPose::from_transform(t).to_params();
    [p[0].to_degrees(), p[1].to_degrees(), p[2].to_degrees(), p[3], p[4], p[5]]
}

fn euler_transform(p: &[f64; 6]) -> RigidTransform {
    EulerPose::from_params(&[p[0].to_radians(), p[1].to_radians(), p[2].to_radians(), p[3], p[4], p[5]])
        .to_transform()
}

impl Default for Config {
    fn default() -> Self {
        let scene = PhantomScene::default();
        let bead = BeadPhantom::default();
        Self {
            seed: 0,
            dims: scene.dims,
            scale: scene.scale,
            probe_origin: scene.probe.origin,
            probe_radius: scene.probe.surface_radius,
            temperature: scene.sos.temperature,
            v_tissue: TISSUE_SOS,
            true_u2pr: euler_params(&scene.true_u2pr),
            ph2m: euler_params(&scene.ph2m),
            noise: NoiseModel::default(),
            degenerate: false,
            beads: false,
            bead_count: 20,
            bead_distance: bead.barycenter_distance(),
            bead_radius: 10.0,
            membrane_points: 200,
            membrane_sigma: 0.43,
            solver: SolverConfig::default(),
            extract: ExtractOptions::default(),
            pairing: Pairing::Indexed,
            manual_lines: BTreeMap::new(),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

fn floats<const N: usize>(line: usize, key: &str, value: &str) -> Result<[f64; N], CliError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != N {
        return Err(bad(line, format!("{key} expects {N} number(s)")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| bad(line, format!("{key}: invalid number {p:?}")))?;
    }
    Ok(out)
}

fn float(line: usize, key: &str, value: &str) -> Result<f64, CliError> {
    Ok(floats::<1>(line, key, value)?[0])
}

fn integer<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("{key}: invalid integer {value:?}")))
}

fn boolean(line: usize, key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(bad(line, format!("{key}: invalid boolean {v:?}"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(n, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => c.seed = integer(n, key, value)?,
                "dims" => {
                    let d = floats::<3>(n, key, value)?;
                    if d.iter().any(|&v| v < 2.0 || v.fract() != 0.0) {
                        return Err(bad(n, "dims must be integers ≥ 2"));
                    }
                    c.dims = d.map(|v| v as usize);
                }
                "scale" => {
                    let s = floats::<3>(n, key, value)?;
                    c.scale = ScaleVector::new(s[0], s[1], s[2]).map_err(|e| bad(n, e))?;
                }
                "probe_origin" => c.probe_origin = Vector3::from(floats::<3>(n, key, value)?),
                "probe_radius" => c.probe_radius = float(n, key, value)?,
                "temperature" => c.temperature = float(n, key, value)?,
                "v_tissue" => c.v_tissue = float(n, key, value)?,
                "true_u2pr" => c.true_u2pr = floats::<6>(n, key, value)?,
                "ph2m" => c.ph2m = floats::<6>(n, key, value)?,
                "pose_noise_rms" => c.noise.pose_noise_rms = float(n, key, value)?,
                "line_jitter" => c.noise.line_jitter = float(n, key, value)?,
                "speckle_sigma" => c.noise.speckle_sigma = float(n, key, value)?,
                "background_level" => c.noise.background_level = integer(n, key, value)?,
                "beam_width" => c.noise.beam_width = float(n, key, value)?,
                "bead_jitter" => c.noise.bead_jitter = float(n, key, value)?,
                "degenerate" => c.degenerate = boolean(n, key, value)?,
                "beads" => c.beads = boolean(n, key, value)?,
                "bead_count" => c.bead_count = integer(n, key, value)?,
                "bead_distance" => c.bead_distance = float(n, key, value)?,
                "bead_radius" => c.bead_radius = float(n, key, value)?,
                "membrane_points" => c.membrane_points = integer(n, key, value)?,
                "membrane_sigma" => c.membrane_sigma = float(n, key, value)?,
                "restarts" => c.solver.restarts = integer(n, key, value)?,
                "translation_range" => c.solver.translation_range = float(n, key, value)?,
                "initial_damping" => c.solver.initial_damping = float(n, key, value)?,
                "damping_factor" => c.solver.damping_factor = float(n, key, value)?,
                "relative_tolerance" => c.solver.relative_tolerance = float(n, key, value)?,
                "max_iterations" => c.solver.max_iterations = integer(n, key, value)?,
                "samples_per_line" => c.extract.samples_per_line = integer(n, key, value)?,
                "ridge_half_window" => c.extract.ridge_half_window = integer(n, key, value)?,
                "min_ridge_points" => c.extract.min_ridge_points = integer(n, key, value)?,
                "pairing" => {
                    c.pairing = match value {
                        "indexed" => Pairing::Indexed,
                        "cross" => Pairing::CrossProduct,
                        v => return Err(bad(n, format!("pairing: expected indexed or cross, got {v:?}"))),
                    }
                }
                _ if key.starts_with("manual_line.") => {
                    let rest = &key["manual_line.".len()..];
                    let (id, slice) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| bad(n, "manual_line.<id>.<xy|zy> expected"))?;
                    let [rho, theta] = floats::<2>(n, key, value)?;
                    let line = Some(Line2D::new(rho, theta.to_radians()));
                    let entry = c.manual_lines.entry(id.to_string()).or_default();
                    match slice {
                        "xy" => entry.xy = line,
                        "zy" => entry.zy = line,
                        s => return Err(bad(n, format!("unknown slice {s:?}"))),
                    }
                }
                _ => return Err(bad(n, format!("unknown key {key:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let err = |m: &str| Err(CliError::Config(m.to_string()));
        if self.solver.restarts == 0 || self.solver.max_iterations == 0 {
            return err("restarts and max_iterations must be positive");
        }
        if self.extract.samples_per_line < 2 {
            return err("samples_per_line must be at least 2");
        }
        if self.noise.pose_noise_rms < 0.0
            || self.noise.line_jitter < 0.0
            || self.noise.speckle_sigma < 0.0
            || self.noise.beam_width < 0.0
            || self.noise.bead_jitter < 0.0
        {
            return err("noise parameters must be non-negative");
        }
        if self.bead_distance <= 0.0 || self.bead_radius <= 0.0 {
            return err("bead geometry must be positive");
        }
        self.probe()?;
        self.sos()?;
        Ok(())
    }

    pub fn probe(&self) -> Result<ProbeGeometry, CliError> {
        ProbeGeometry::new(self.probe_origin, self.probe_radius).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn sos(&self) -> Result<SosContext, CliError> {
        SosContext::from_temperature(self.temperature, self.v_tissue).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn scene(&self) -> Result<PhantomScene, CliError> {
        Ok(PhantomScene {
            true_u2pr: euler_transform(&self.true_u2pr),
            ph2m: euler_transform(&self.ph2m),
            scale: self.scale,
            dims: self.dims,
            probe: self.probe()?,
            sos: self.sos()?,
        })
    }

    pub fn bead_phantom(&self) -> BeadPhantom {
        BeadPhantom::new(self.bead_distance, self.bead_radius)
    }

    pub fn overrides(&self, id: &str) -> LineOverrides {
        self.manual_lines.get(id).copied().unwrap_or_default()
    }

    /// Round-trippable `key = value` text.
    pub fn to_text(&self) -> String {
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        let s = self.scale.as_vector();
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("dims = {} {} {}", self.dims[0], self.dims[1], self.dims[2]),
            format!("scale = {}", f(&[s.x, s.y, s.z])),
            format!("probe_origin = {}", f(self.probe_origin.as_slice())),
            format!("probe_radius = {}", f(&[self.probe_radius])),
            format!("temperature = {}", f(&[self.temperature])),
            format!("v_tissue = {}", f(&[self.v_tissue])),
            format!("true_u2pr = {}", f(&self.true_u2pr)),
            format!("ph2m = {}", f(&self.ph2m)),
            format!("pose_noise_rms = {}", f(&[self.noise.pose_noise_rms])),
            format!("line_jitter = {}", f(&[self.noise.line_jitter])),
            format!("speckle_sigma = {}", f(&[self.noise.speckle_sigma])),
            format!("background_level = {}", self.noise.background_level),
            format!("beam_width = {}", f(&[self.noise.beam_width])),
            format!("bead_jitter = {}", f(&[self.noise.bead_jitter])),
            format!("degenerate = {}", self.degenerate),
            format!("beads = {}", self.beads),
            format!("bead_count = {}", self.bead_count),
            format!("bead_distance = {}", f(&[self.bead_distance])),
            format!("bead_radius = {}", f(&[self.bead_radius])),
            format!("membrane_points = {}", self.membrane_points),
            format!("membrane_sigma = {}", f(&[self.membrane_sigma])),
            format!("restarts = {}", self.solver.restarts),
            format!("translation_range = {}", f(&[self.solver.translation_range])),
            format!("initial_damping = {:e}", self.solver.initial_damping),
            format!("damping_factor = {}", f(&[self.solver.damping_factor])),
            format!("relative_tolerance = {:e}", self.solver.relative_tolerance),
            format!("max_iterations = {}", self.solver.max_iterations),
            format!("samples_per_line = {}", self.extract.samples_per_line),
            format!("ridge_half_window = {}", self.extract.ridge_half_window),
            format!("min_ridge_points = {}", self.extract.min_ridge_points),
            format!(
                "pairing = {}",
                match self.pairing {
                    Pairing::Indexed => "indexed",
                    Pairing::CrossProduct => "cross",
                }
            ),
        ];
        for (id, o) in &self.manual_lines {
            for (label, line) in [("xy", o.xy), ("zy", o.zy)] {
                if let Some(l) = line {
                    lines.push(format!("manual_line.{id}.{label} = {}", f(&[l.rho, l.theta.to_degrees()])));
                }
            }
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(Config::parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = Config::parse(
            "seed = 7 # trailing\nrestarts=3\nmanual_line.vol03.xy = 80.5 95\nmanual_line.vol03.zy = 10 5\npairing = cross\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.solver.restarts, 3);
        let o = c.overrides("vol03");
        assert_eq!(o.xy.unwrap().rho, 80.5);
        assert!((o.zy.unwrap().theta.to_degrees() - 5.0).abs() < 1e-12);
        assert_eq!(c.overrides("vol00"), LineOverrides::default());
        assert_eq!(c.pairing, Pairing::CrossProduct);
    }

    #[test]
    fn rejects_malformed_input() {
        for text in [
            "bogus = 1",
            "seed 4",
            "scale = 1 2",
            "temperature = 90",
            "probe_radius = -1",
            "dims = 1 2 3",
            "manual_line.a.qq = 1 2",
            "restarts = 0",
            "beads = maybe",
        ] {
            assert!(matches!(Config::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::parse("seed = 99\nmanual_line.v1.zy = 12.5 30\n").unwrap();
        c.noise.speckle_sigma = 0.125;
        assert_eq!(Config::parse(&c.to_text()).unwrap().to_text(), c.to_text());
    }
}
