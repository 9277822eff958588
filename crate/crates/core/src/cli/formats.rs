//! On-disk formats: volumes, pose logs, calibrations, pre-calibrations,
//! bead lists and PGM images. Numbers are written fixed point with six
//! decimals unless full precision is needed for a round trip.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::geometry::{RigidTransform, ScaleVector};
use crate::sim::Side;
use crate::sos::ProbeGeometry;
use crate::volume::{Slice2D, Volume};

use super::CliError;

const VOLUME_MAGIC: &str = "USVOL 1";
const CALIBRATION_MAGIC: &str = "USCAL 1";
const PRECALIB_MAGIC: &str = "USPRECAL 1";
const BEADS_MAGIC: &str = "USBEADS 1";

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Format(format!("{}: {msg}", path.display()))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn parse_floats(path: &Path, s: &str, n: usize) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| data_err(path, format!("invalid numbers {s:?}")))?;
    if v.len() != n {
        return Err(data_err(path, format!("expected {n} numbers in {s:?}")));
    }
    Ok(v)
}

/// Volume plus the acquisition facts the scanner reports with it.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub volume: Volume,
    pub probe: ProbeGeometry,
    pub temperature: f64,
}

impl VolumeFile {
    /// Text header terminated by `end`, then the raw x-fastest payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [nx, ny, nz] = self.volume.dims();
        let s = self.volume.scale().as_vector();
        let o = self.probe.origin;
        let header = format!(
            "{VOLUME_MAGIC}\ndims {nx} {ny} {nz}\nscale {:?} {:?} {:?}\nprobe_origin {:?} {:?} {:?}\nprobe_radius {:?}\ntemperature {:?}\nend\n",
            s.x, s.y, s.z, o.x, o.y, o.z, self.probe.surface_radius, self.temperature
        );
        let mut out = header.into_bytes();
        out.extend_from_slice(self.volume.data());
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::from_reader(BufReader::new(file), path)
    }

    pub fn from_reader(mut r: impl BufRead, path: &Path) -> Result<Self, CliError> {
        let mut dims = None;
        let mut scale = None;
        let mut origin = None;
        let mut radius = None;
        let mut temperature = None;
        let mut first = true;
        loop {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| io_err(path, e))? == 0 {
                return Err(data_err(path, "header not terminated"));
            }
            let line = line.trim_end();
            if first {
                if line != VOLUME_MAGIC {
                    return Err(data_err(path, "not a volume file"));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "dims" => {
                    let d = parse_floats(path, rest, 3)?;
                    if d.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
                        return Err(data_err(path, "dims must be positive integers"));
                    }
                    dims = Some([d[0] as usize, d[1] as usize, d[2] as usize]);
                }
                "scale" => {
                    let s = parse_floats(path, rest, 3)?;
                    scale = Some(ScaleVector::new(s[0], s[1], s[2]).map_err(|e| data_err(path, e))?);
                }
                "probe_origin" => origin = Some(Vector3::from_vec(parse_floats(path, rest, 3)?)),
                "probe_radius" => radius = Some(parse_floats(path, rest, 1)?[0]),
                "temperature" => temperature = Some(parse_floats(path, rest, 1)?[0]),
                _ => return Err(data_err(path, format!("unknown header field {key:?}"))),
            }
        }
        let missing = |f: &str| data_err(path, format!("missing header field {f}"));
        let dims = dims.ok_or_else(|| missing("dims"))?;
        let scale = scale.ok_or_else(|| missing("scale"))?;
        let probe = ProbeGeometry::new(
            origin.ok_or_else(|| missing("probe_origin"))?,
            radius.ok_or_else(|| missing("probe_radius"))?,
        )
        .map_err(|e| data_err(path, e))?;
        let temperature = temperature.ok_or_else(|| missing("temperature"))?;
        let mut data = Vec::with_capacity(dims.iter().product());
        r.read_to_end(&mut data).map_err(|e| io_err(path, e))?;
        let volume = Volume::new(dims, scale, data).map_err(|e| data_err(path, e))?;
        Ok(Self {
            volume,
            probe,
            temperature,
        })
    }
}

/// One tracker record.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub timestamp: f64,
    pub pose: RigidTransform,
}

/// CSV `id,timestamp,tx,ty,tz,qw,qx,qy,qz` with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseLog {
    pub records: Vec<PoseRecord>,
}

const POSE_HEADER: &str = "id,timestamp,tx,ty,tz,qw,qx,qy,qz";

impl PoseLog {
    pub fn get(&self, id: &str) -> Option<&PoseRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(POSE_HEADER);
        out.push('\n');
        for r in &self.records {
            let q = UnitQuaternion::from_matrix(&r.pose.rotation);
            let t = r.pose.translation;
            writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.id, r.timestamp, t.x, t.y, t.z, q.w, q.i, q.j, q.k
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut records: Vec<PoseRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == POSE_HEADER) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 9 || fields[0].is_empty() {
                return Err(data_err(path, format!("line {}: expected 9 fields", i + 1)));
            }
            let v = parse_floats(path, &fields[1..].join(" "), 8)?;
            let q = Quaternion::new(v[4], v[5], v[6], v[7]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(data_err(path, format!("line {}: quaternion not unit", i + 1)));
            }
            if records.iter().any(|r| r.id == fields[0]) {
                return Err(data_err(path, format!("duplicate id {}", fields[0])));
            }
            let rotation = UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner();
            records.push(PoseRecord {
                id: fields[0].to_string(),
                timestamp: v[0],
                pose: RigidTransform::new(rotation, Vector3::new(v[1], v[2], v[3])),
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read_text(path)?, path)
    }
}

fn matrix_lines(out: &mut String, t: &RigidTransform) {
    let m = t.to_matrix4();
    for r in 0..4 {
        writeln!(out, "row {:?} {:?} {:?} {:?}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]).unwrap();
    }
}

fn parse_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<RigidTransform, CliError> {
    if rows.len() != 4 {
        return Err(data_err(path, "expected 4 matrix rows"));
    }
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    RigidTransform::from_matrix4(&m, 1e-6).map_err(|e| data_err(path, e))
}

/// Solved or ground-truth `T_U2Pr` with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFile {
    pub u2pr: RigidTransform,
    pub scale: ScaleVector,
    pub rms_residual: f64,
    pub max_residual: f64,
    pub tool_version: String,
    /// Echo of the configuration that produced it.
    pub config: String,
}

impl CalibrationFile {
    pub fn to_text(&self) -> String {
        let mut out = format!("{CALIBRATION_MAGIC}\ntool_version {}\n", self.tool_version);
        matrix_lines(&mut out, &self.u2pr);
        let s = self.scale.as_vector();
        writeln!(out, "scale {:?} {:?} {:?}", s.x, s.y, s.z).unwrap();
        writeln!(out, "rms_residual {:.6}", self.rms_residual).unwrap();
        writeln!(out, "max_residual {:.6}", self.max_residual).unwrap();
        out.push_str("config\n");
        for line in self.config.lines() {
            writeln!(out, "  {line}").unwrap();
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next() != Some(CALIBRATION_MAGIC) {
            return Err(data_err(path, "not a calibration file"));
        }
        let mut rows = Vec::new();
        let (mut scale, mut rms, mut max, mut version) = (None, 0.0, 0.0, String::new());
        let mut config = String::new();
        let mut in_config = false;
        for line in lines {
            if in_config {
                if line == "end" {
                    in_config = false;
                } else {
                    config.push_str(line.strip_prefix("  ").unwrap_or(line));
                    config.push('\n');
                }
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "tool_version" => version = rest.to_string(),
                "row" => rows.push(parse_floats(path, rest, 4)?),
                "scale" => {
                    let s = parse_floats(path, rest, 3)?;
                    scale = Some(ScaleVector::new(s[0], s[1], s[2]).map_err(|e| data_err(path, e))?);
                }
                "rms_residual" => rms = parse_floats(path, rest, 1)?[0],
                "max_residual" => max = parse_floats(path, rest, 1)?[0],
                "config" => in_config = true,
                "" => {}
                _ => return Err(data_err(path, format!("unknown field {key:?}"))),
            }
        }
        Ok(Self {
            u2pr: parse_matrix(path, &rows)?,
            scale: scale.ok_or_else(|| data_err(path, "missing scale"))?,
            rms_residual: rms,
            max_residual: max,
            tool_version: version,
            config,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read_text(path)?, path)
    }
}

/// `T_Ph2M` with the fit quality of the digitized membrane points.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecalibFile {
    pub ph2m: RigidTransform,
    pub rms: f64,
    /// Indices of points rejected by the robust fit.
    pub outliers: Vec<usize>,
}

impl PrecalibFile {
    pub fn to_text(&self) -> String {
        let mut out = format!("{PRECALIB_MAGIC}\n");
        matrix_lines(&mut out, &self.ph2m);
        writeln!(out, "rms {:.6}", self.rms).unwrap();
        let ids: Vec<String> = self.outliers.iter().map(|i| i.to_string()).collect();
        writeln!(out, "outliers {}", ids.join(" ")).unwrap();
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next() != Some(PRECALIB_MAGIC) {
            return Err(data_err(path, "not a pre-calibration file"));
        }
        let (mut rows, mut rms, mut outliers) = (Vec::new(), 0.0, Vec::new());
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "row" => rows.push(parse_floats(path, rest, 4)?),
                "rms" => rms = parse_floats(path, rest, 1)?[0],
                "outliers" => {
                    outliers = rest
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| data_err(path, format!("bad index {t:?}"))))
                        .collect::<Result<_, _>>()?
                }
                "" => {}
                _ => return Err(data_err(path, format!("unknown field {key:?}"))),
            }
        }
        Ok(Self {
            ph2m: parse_matrix(path, &rows)?,
            rms,
            outliers,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read_text(path)?, path)
    }
}

/// Whitespace-separated `x y z` rows; `#` comments allowed.
pub fn parse_points(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>, CliError> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| parse_floats(path, l, 3).map(Vector3::from_vec))
        .collect()
}

pub fn points_to_text(points: &[Vector3<f64>]) -> String {
    let mut out = String::from("# x y z (mm, phantom reference frame)\n");
    for p in points {
        writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z).unwrap();
    }
    out
}

/// Digitized beads of one acquisition, displayed voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BeadRecord {
    pub id: String,
    pub side: Side,
    pub pose: RigidTransform,
    pub beads: Vec<Vector3<f64>>,
}

/// Bead session: phantom barycenter distance, the scanner facts needed for
/// sound-speed correction, and per-acquisition bead lists.
#[derive(Debug, Clone, PartialEq)]
pub struct BeadsFile {
    pub d_b: f64,
    pub scale: ScaleVector,
    pub probe: ProbeGeometry,
    pub temperature: f64,
    pub records: Vec<BeadRecord>,
}

impl BeadsFile {
    pub fn to_text(&self) -> String {
        let s = self.scale.as_vector();
        let o = self.probe.origin;
        let mut out = format!(
            "{BEADS_MAGIC}\nd_b {:?}\nscale {:?} {:?} {:?}\nprobe_origin {:?} {:?} {:?}\nprobe_radius {:?}\ntemperature {:?}\n",
            self.d_b, s.x, s.y, s.z, o.x, o.y, o.z, self.probe.surface_radius, self.temperature
        );
        for r in &self.records {
            let q = UnitQuaternion::from_matrix(&r.pose.rotation);
            let t = r.pose.translation;
            writeln!(
                out,
                "acq {} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                r.id,
                r.side.label(),
                t.x,
                t.y,
                t.z,
                q.w,
                q.i,
                q.j,
                q.k
            )
            .unwrap();
            for b in &r.beads {
                writeln!(out, "bead {:?} {:?} {:?}", b.x, b.y, b.z).unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next() != Some(BEADS_MAGIC) {
            return Err(data_err(path, "not a beads file"));
        }
        let (mut d_b, mut scale, mut origin, mut radius, mut temperature) = (None, None, None, None, None);
        let mut records: Vec<BeadRecord> = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "d_b" => d_b = Some(parse_floats(path, rest, 1)?[0]),
                "scale" => {
                    let s = parse_floats(path, rest, 3)?;
                    scale = Some(ScaleVector::new(s[0], s[1], s[2]).map_err(|e| data_err(path, e))?);
                }
                "probe_origin" => origin = Some(Vector3::from_vec(parse_floats(path, rest, 3)?)),
                "probe_radius" => radius = Some(parse_floats(path, rest, 1)?[0]),
                "temperature" => temperature = Some(parse_floats(path, rest, 1)?[0]),
                "acq" => {
                    let mut parts = rest.splitn(3, ' ');
                    let id = parts.next().unwrap_or("").to_string();
                    let side = Side::parse(parts.next().unwrap_or(""))
                        .ok_or_else(|| data_err(path, format!("bad side in {line:?}")))?;
                    let v = parse_floats(path, parts.next().unwrap_or(""), 7)?;
                    let q = Quaternion::new(v[3], v[4], v[5], v[6]);
                    if (q.norm() - 1.0).abs() > 1e-6 {
                        return Err(data_err(path, format!("quaternion not unit in {id}")));
                    }
                    records.push(BeadRecord {
                        id,
                        side,
                        pose: RigidTransform::new(
                            UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner(),
                            Vector3::new(v[0], v[1], v[2]),
                        ),
                        beads: Vec::new(),
                    });
                }
                "bead" => {
                    let rec = records
                        .last_mut()
                        .ok_or_else(|| data_err(path, "bead before any acq"))?;
                    rec.beads.push(Vector3::from_vec(parse_floats(path, rest, 3)?));
                }
                "" => {}
                _ => return Err(data_err(path, format!("unknown field {key:?}"))),
            }
        }
        let missing = |f: &str| data_err(path, format!("missing {f}"));
        Ok(Self {
            d_b: d_b.ok_or_else(|| missing("d_b"))?,
            scale: scale.ok_or_else(|| missing("scale"))?,
            probe: ProbeGeometry::new(
                origin.ok_or_else(|| missing("probe_origin"))?,
                radius.ok_or_else(|| missing("probe_radius"))?,
            )
            .map_err(|e| data_err(path, e))?,
            temperature: temperature.ok_or_else(|| missing("temperature"))?,
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read_text(path)?, path)
    }
}

/// Binary portable graymap (P5).
pub fn write_pgm(path: &Path, image: &Slice2D) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height).map_err(|e| io_err(path, e))?;
    f.write_all(&image.pixels).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Slice2D, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(data_err(path, "expected 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| data_err(path, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| data_err(path, "bad height"))?;
    Slice2D::from_pixels(w, h, bytes[pos + 1..].to_vec()).map_err(|e| data_err(path, e))
}
