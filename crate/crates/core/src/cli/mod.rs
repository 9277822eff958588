//! Command implementations behind the `membrane-calib` binary.
//!
//! Every command reads and writes plain files; see [`formats`] for the
//! layouts and [`config`] for the configuration keys.

pub mod config;
pub mod formats;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::campaign::{
    bead_sets, calibrate, digitize_beads, simulate_acquisitions, CampaignError, CalibrationRun, VolumeInput,
};
use crate::detect::{extract_plane_with, Line2D, PlaneObservation};
use crate::geometry::{precalibrate_membrane, Plane, RigidTransform};
use crate::metrics::{calibration_precision, reconstruction_accuracy, BeadAcquisition};
use crate::sim::{
    degenerate_poses, derive_seed, membrane_surface_points, plane_slice_line, protocol_poses, render_bead_volumes,
};
use crate::solver::SolverError;
use crate::sos::{distort_point, SosContext};
use crate::volume::{Slice2D, SliceKind};

pub use config::Config;
use formats::{
    read_text, write_pgm, write_text, BeadRecord, BeadsFile, CalibrationFile, PoseLog, PoseRecord, PrecalibFile,
    VolumeFile,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
    #[error("data: {0}")]
    Data(String),
    #[error("solver: {0}")]
    Solver(String),
}

impl CliError {
    /// Process exit code: 2 usage/config, 3 I/O, 4 input data or
    /// detection, 5 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Format(_) | CliError::Data(_) => 4,
            CliError::Solver(_) => 5,
        }
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Solver(s) => s.into(),
            CampaignError::Sim(s) => CliError::Config(s.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidProblem(m) => CliError::Data(m),
            e @ SolverError::NotConverged { .. } => CliError::Solver(e.to_string()),
        }
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Files in `dir` with the given extension, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, CliError> {
    let mut config = match path {
        Some(p) => Config::parse(&read_text(p)?)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// What [`cmd_simulate`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub volumes: Vec<PathBuf>,
    pub bead_volumes: Vec<PathBuf>,
}

/// Writes the protocol volumes (`<id>.vol`), `poses.csv`,
/// `ground_truth.cal`, `precalib.txt` (exact `T_Ph2M`) and
/// `membrane_points.txt`; with `beads = true` also `beads/<id>.vol` and
/// `beads.txt`.
///
/// Seed streams: 0 protocol, 1 membrane volumes, 2 bead volumes, 3 bead
/// digitization, 4 membrane points.
pub fn cmd_simulate(config: &Config, out: &Path) -> Result<SimulateSummary, CliError> {
    let scene = config.scene()?;
    let seed = config.seed;
    let poses = if config.degenerate {
        degenerate_poses(&scene)
    } else {
        protocol_poses(&scene, derive_seed(seed, 0))
    };
    let acquisitions = simulate_acquisitions(&scene, &config.noise, &poses, derive_seed(seed, 1))
        .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(out)?;
    let mut volumes = Vec::new();
    let mut log = PoseLog::default();
    for (i, acq) in acquisitions.iter().enumerate() {
        let path = out.join(format!("{}.vol", acq.id));
        VolumeFile {
            volume: acq.volume.clone(),
            probe: scene.probe,
            temperature: scene.sos.temperature,
        }
        .write(&path)?;
        volumes.push(path);
        log.records.push(PoseRecord {
            id: acq.id.clone(),
            timestamp: 3.0 * i as f64,
            pose: acq.measured_pose,
        });
    }
    write_text(&out.join("poses.csv"), &log.to_text())?;
    let truth = CalibrationFile {
        u2pr: scene.true_u2pr,
        scale: scene.scale,
        rms_residual: 0.0,
        max_residual: 0.0,
        tool_version: TOOL_VERSION.to_string(),
        config: config.to_text(),
    };
    write_text(&out.join("ground_truth.cal"), &truth.to_text())?;
    let precalib = PrecalibFile {
        ph2m: scene.ph2m,
        rms: 0.0,
        outliers: Vec::new(),
    };
    write_text(&out.join("precalib.txt"), &precalib.to_text())?;
    let points = membrane_surface_points(
        &scene,
        config.membrane_points,
        100.0,
        config.membrane_sigma,
        derive_seed(seed, 4),
    );
    write_text(&out.join("membrane_points.txt"), &formats::points_to_text(&points))?;

    let mut bead_paths = Vec::new();
    if config.beads {
        let phantom = config.bead_phantom();
        let rendered = render_bead_volumes(&scene, &phantom, config.bead_count, &config.noise, derive_seed(seed, 2))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let located = digitize_beads(&rendered, &config.noise, derive_seed(seed, 3));
        let dir = out.join("beads");
        create_dir(&dir)?;
        let mut records = Vec::new();
        for (v, l) in rendered.iter().zip(&located) {
            let path = dir.join(format!("{}.vol", l.id));
            VolumeFile {
                volume: v.volume.clone(),
                probe: scene.probe,
                temperature: scene.sos.temperature,
            }
            .write(&path)?;
            bead_paths.push(path);
            records.push(BeadRecord {
                id: l.id.clone(),
                side: l.side,
                pose: l.measured_pose,
                beads: l.beads.clone(),
            });
        }
        let file = BeadsFile {
            d_b: phantom.barycenter_distance(),
            scale: scene.scale,
            probe: scene.probe,
            temperature: scene.sos.temperature,
            records,
        };
        write_text(&out.join("beads.txt"), &file.to_text())?;
    }
    Ok(SimulateSummary {
        volumes,
        bead_volumes: bead_paths,
    })
}

/// Robust plane fit of digitized membrane points.
pub fn cmd_precalibrate(points: &Path, out: &Path) -> Result<PrecalibFile, CliError> {
    let pts = formats::parse_points(&read_text(points)?, points)?;
    let pre = precalibrate_membrane(&pts).map_err(|e| CliError::Data(e.to_string()))?;
    let file = PrecalibFile {
        ph2m: pre.ph2m,
        rms: pre.rms(),
        outliers: pre
            .fit
            .inliers
            .iter()
            .enumerate()
            .filter(|(_, &inlier)| !inlier)
            .map(|(i, _)| i)
            .collect(),
    };
    write_text(out, &file.to_text())?;
    Ok(file)
}

struct LoadedVolume {
    id: String,
    file: VolumeFile,
    sos: SosContext,
    pose: RigidTransform,
}

/// Volumes of `dir` paired with their pose records. Every volume needs a
/// record; extra records are ignored.
fn load_session(dir: &Path, poses: &Path, config: &Config) -> Result<Vec<LoadedVolume>, CliError> {
    let log = PoseLog::read(poses)?;
    let files = list_files(dir, "vol")?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no .vol files in {}", dir.display())));
    }
    let unmatched: Vec<String> = files
        .iter()
        .map(|p| stem(p))
        .filter(|id| log.get(id).is_none())
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::Data(format!("no pose record for {}", unmatched.join(", "))));
    }
    files
        .iter()
        .map(|p| {
            let id = stem(p);
            let file = VolumeFile::read(p)?;
            let sos = SosContext::from_temperature(file.temperature, config.v_tissue)
                .map_err(|e| CliError::Format(format!("{}: {e}", p.display())))?;
            let pose = log.get(&id).map(|r| r.pose).unwrap_or_else(RigidTransform::identity);
            Ok(LoadedVolume { id, file, sos, pose })
        })
        .collect()
}

fn inputs(session: &[LoadedVolume]) -> Vec<VolumeInput<'_>> {
    session
        .iter()
        .map(|v| VolumeInput {
            id: &v.id,
            volume: &v.file.volume,
            probe: &v.file.probe,
            sos: v.sos,
            pose: v.pose,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CalibrateOutput {
    pub calibration: CalibrationFile,
    pub run: CalibrationRun,
    pub report: String,
    /// Non-fatal problems, also listed in the report.
    pub warnings: Vec<String>,
}

/// Extracts, corrects and solves; writes `calibration.cal` and
/// `calibration_report.txt` into `out`.
pub fn cmd_calibrate(
    volumes: &Path,
    poses: &Path,
    precalib: &Path,
    config: &Config,
    out: &Path,
) -> Result<CalibrateOutput, CliError> {
    let session = load_session(volumes, poses, config)?;
    let pre = PrecalibFile::read(precalib)?;
    let overrides = |id: &str| config.overrides(id);
    let solver = crate::solver::SolverConfig {
        seed: config.seed,
        ..config.solver
    };
    let run = calibrate(&inputs(&session), &pre.ph2m, &overrides, &config.extract, &solver)?;
    let mut warnings: Vec<String> = run
        .failures
        .iter()
        .map(|(id, e)| format!("detection failed for {id}: {e}; supply manual_line.{id}.<xy|zy> to include it"))
        .collect();
    if run.result.diagnostics.condition_flag {
        warnings.push(format!(
            "ill-conditioned protocol: singular value ratio {:.3e}, numerical rank {}",
            run.result.diagnostics.ratio(),
            run.result.diagnostics.numerical_rank()
        ));
    }
    let calibration = CalibrationFile {
        u2pr: run.result.u2pr,
        scale: *run.problem.scale(),
        rms_residual: run.result.rms_residual,
        max_residual: run.result.max_residual,
        tool_version: TOOL_VERSION.to_string(),
        config: config.to_text(),
    };
    let report = calibration_report(&run, &warnings, config);
    create_dir(out)?;
    write_text(&out.join("calibration.cal"), &calibration.to_text())?;
    write_text(&out.join("calibration_report.txt"), &report)?;
    Ok(CalibrateOutput {
        calibration,
        run,
        report,
        warnings,
    })
}

fn calibration_report(run: &CalibrationRun, warnings: &[String], config: &Config) -> String {
    let mut out = run.feature.to_table("feature extraction precision");
    out.push('\n');
    out.push_str("[observations]\n");
    for (obs, rms) in run.problem.observations().iter().zip(&run.result.per_observation_residuals) {
        writeln!(out, "{:<12} rms_residual_mm {rms:.6}", obs.id).unwrap();
    }
    out.push('\n');
    let d = &run.result.diagnostics;
    out.push_str("[solver]\n");
    writeln!(out, "rms_residual_mm {:.6}", run.result.rms_residual).unwrap();
    writeln!(out, "max_residual_mm {:.6}", run.result.max_residual).unwrap();
    writeln!(out, "restarts_converged {}", run.result.restarts_converged).unwrap();
    writeln!(out, "best_restart {}", run.result.best_restart).unwrap();
    let sv: Vec<String> = d.singular_values.iter().map(|s| format!("{s:.6e}")).collect();
    writeln!(out, "singular_values {}", sv.join(" ")).unwrap();
    writeln!(out, "condition_flag {}", d.condition_flag).unwrap();
    out.push('\n');
    out.push_str("[warnings]\n");
    for w in warnings {
        writeln!(out, "{w}").unwrap();
    }
    out.push('\n');
    out.push_str("[config]\n");
    out.push_str(&config.to_text());
    out
}

/// Per-slice agreement between the extracted line and the calibrated
/// membrane.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRow {
    pub id: String,
    pub slice: SliceKind,
    /// RMS in-slice distance of the extracted samples to the computed line,
    /// mm. `None` when extraction failed.
    pub distance_mm: Option<f64>,
    pub angle_deg: Option<f64>,
}

fn metric_line(line: &Line2D, scale: [f64; 2]) -> ((f64, f64), (f64, f64)) {
    let (au, av) = line.anchor();
    let (du, dv) = line.direction();
    let (du, dv) = (du * scale[0], dv * scale[1]);
    let n = (du * du + dv * dv).sqrt();
    ((au * scale[0], av * scale[1]), (du / n, dv / n))
}

fn slice_deltas(
    obs: &PlaneObservation,
    kind: SliceKind,
    computed: &Line2D,
    scale: [f64; 2],
    samples_per_line: usize,
) -> (f64, f64) {
    let ((cu, cv), (du, dv)) = metric_line(computed, scale);
    let samples = match kind {
        SliceKind::Xy => &obs.sample_points[..samples_per_line],
        SliceKind::Zy => &obs.sample_points[samples_per_line..],
    };
    let sq: f64 = samples
        .iter()
        .map(|p| {
            let (u, v) = kind.project(p);
            let (x, y) = (u * scale[0] - cu, v * scale[1] - cv);
            let d = x * dv - y * du;
            d * d
        })
        .sum();
    let distance = (sq / samples.len() as f64).sqrt();
    let (_, (eu, ev)) = metric_line(obs.line(kind), scale);
    let cross = (eu * dv - ev * du).abs();
    let dot = (eu * du + ev * dv).abs();
    (distance, cross.atan2(dot).to_degrees())
}

/// Draws a line given in corrected voxel coordinates onto the displayed
/// slice.
fn burn_line(img: &mut Slice2D, line: &Line2D, loaded: &LoadedVolume, value: u8) {
    let Some(((u0, v0), (u1, v1))) = line.clip(img.width, img.height) else {
        return;
    };
    let len = ((u1 - u0).powi(2) + (v1 - v0).powi(2)).sqrt();
    let steps = (len * 4.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let p = img.kind.lift(u0 + f * (u1 - u0), v0 + f * (v1 - v0), img.fixed as f64);
        let Ok(shown) = distort_point(&p, loaded.file.volume.scale(), &loaded.file.probe, &loaded.sos) else {
            continue;
        };
        let (u, v) = img.kind.project(&shown);
        let (u, v) = (u.round(), v.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < img.width && (v as usize) < img.height {
            img.set(u as usize, v as usize, value);
        }
    }
}

/// Overlays of the computed membrane line (255) and the extracted line
/// (128) on both extraction slices of every volume, written as
/// `<id>_<slice>.pgm`, plus `backtest.txt`.
pub fn cmd_backtest(
    volumes: &Path,
    poses: &Path,
    precalib: &Path,
    calibration: &Path,
    config: &Config,
    out: &Path,
) -> Result<Vec<BacktestRow>, CliError> {
    let session = load_session(volumes, poses, config)?;
    let pre = PrecalibFile::read(precalib)?;
    let cal = CalibrationFile::read(calibration)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for loaded in &session {
        let scale = loaded.file.volume.scale();
        let chain = pre.ph2m.compose(&loaded.pose).compose(&cal.u2pr);
        let plane: Plane = Plane::xy().transformed(&chain.inverse());
        let extracted = extract_plane_with(
            &loaded.file.volume,
            &loaded.file.probe,
            &loaded.sos,
            &config.overrides(&loaded.id),
            &config.extract,
        );
        for kind in [SliceKind::Xy, SliceKind::Zy] {
            let mut img = loaded
                .file
                .volume
                .slice(kind, &loaded.file.probe.origin)
                .map_err(|e| CliError::Data(format!("{}: {e}", loaded.id)))?;
            let computed = plane_slice_line(&plane, scale, kind, img.fixed as f64);
            let mut row = BacktestRow {
                id: loaded.id.clone(),
                slice: kind,
                distance_mm: None,
                angle_deg: None,
            };
            if let Ok(obs) = &extracted {
                burn_line(&mut img, obs.line(kind), loaded, 128);
                if let Some(c) = &computed {
                    let (d, a) = slice_deltas(obs, kind, c, img.scale, config.extract.samples_per_line);
                    row.distance_mm = Some(d);
                    row.angle_deg = Some(a);
                }
            }
            if let Some(c) = &computed {
                burn_line(&mut img, c, loaded, 255);
            }
            write_pgm(&out.join(format!("{}_{}.pgm", loaded.id, kind.label())), &img)?;
            rows.push(row);
        }
    }
    write_text(&out.join("backtest.txt"), &backtest_text(&rows))?;
    Ok(rows)
}

fn backtest_text(rows: &[BacktestRow]) -> String {
    let mut out = format!("{:<12} {:<5} {:>14} {:>14}\n", "id", "slice", "distance_mm", "angle_deg");
    for r in rows {
        match (r.distance_mm, r.angle_deg) {
            (Some(d), Some(a)) => writeln!(out, "{:<12} {:<5} {d:>14.6} {a:>14.6}", r.id, r.slice.label()).unwrap(),
            _ => writeln!(out, "{:<12} {:<5} {:>14} {:>14}", r.id, r.slice.label(), "-", "-").unwrap(),
        }
    }
    out
}

/// Calibration precision over the `.cal` files of `calibrations`, and
/// reconstruction accuracy when a beads file is given.
pub fn cmd_evaluate(
    calibrations: &Path,
    beads: Option<&Path>,
    config: &Config,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let files = list_files(calibrations, "cal")?;
    let cals: Vec<CalibrationFile> = files.iter().map(|p| CalibrationFile::read(p)).collect::<Result<_, _>>()?;
    if cals.len() < 2 {
        return Err(CliError::Data(format!(
            "calibration precision needs at least 2 calibrations, found {}",
            cals.len()
        )));
    }
    let scale = cals[0].scale;
    let transforms: Vec<RigidTransform> = cals.iter().map(|c| c.u2pr).collect();
    let precision =
        calibration_precision(&transforms, &scale, config.dims).map_err(|e| CliError::Data(e.to_string()))?;
    let mut report = precision.to_table("calibration precision");
    if let Some(path) = beads {
        let file = BeadsFile::read(path)?;
        let sos = SosContext::from_temperature(file.temperature, config.v_tissue)
            .map_err(|e| CliError::Format(e.to_string()))?;
        let located: Vec<crate::campaign::LocatedBeads> = file
            .records
            .iter()
            .map(|r| crate::campaign::LocatedBeads {
                id: r.id.clone(),
                side: r.side,
                beads: r.beads.clone(),
                measured_pose: r.pose,
            })
            .collect();
        let (left, right): (Vec<BeadAcquisition>, Vec<BeadAcquisition>) =
            bead_sets(&located, &file.scale, &file.probe, &sos).map_err(|e| CliError::Data(e.to_string()))?;
        let accuracy = reconstruction_accuracy(&left, &right, &transforms, file.d_b, &file.scale, config.pairing)
            .map_err(|e| CliError::Data(e.to_string()))?;
        report.push('\n');
        report.push_str(&accuracy.to_table("reconstruction accuracy"));
    }
    if let Some(p) = out {
        write_text(p, &report)?;
    }
    Ok(report)
}
