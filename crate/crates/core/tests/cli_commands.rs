use std::path::{Path, PathBuf};
use std::process::Command;

use membrane_calib::cli::formats::{read_pgm, BeadsFile, CalibrationFile, PoseLog, VolumeFile};
use membrane_calib::cli::{cmd_backtest, cmd_calibrate, cmd_evaluate, cmd_precalibrate, cmd_simulate, CliError, Config};
use membrane_calib::geometry::RigidTransform;
use nalgebra::Vector3;
use tempfile::TempDir;

fn noiseless() -> Config {
    let mut c = Config::default();
    c.noise.pose_noise_rms = 0.0;
    c.noise.line_jitter = 0.0;
    c.noise.speckle_sigma = 0.0;
    c.noise.bead_jitter = 0.0;
    c.seed = 5;
    c
}

fn simulate(config: &Config) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    cmd_simulate(config, &out).unwrap();
    (dir, out)
}

fn calibrate_in(sim: &Path, config: &Config, out: &Path) -> Result<membrane_calib::cli::CalibrateOutput, CliError> {
    cmd_calibrate(sim, &sim.join("poses.csv"), &sim.join("precalib.txt"), config, out)
}

#[test]
fn simulate_writes_the_session() {
    let mut config = noiseless();
    config.beads = true;
    let (_dir, out) = simulate(&config);
    let volumes: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "vol"))
        .collect();
    assert_eq!(volumes.len(), 12);
    assert_eq!(PoseLog::read(&out.join("poses.csv")).unwrap().records.len(), 12);
    CalibrationFile::read(&out.join("ground_truth.cal")).unwrap();
    assert_eq!(std::fs::read_dir(out.join("beads")).unwrap().count(), 20);
    let beads = BeadsFile::read(&out.join("beads.txt")).unwrap();
    assert_eq!(beads.records.len(), 20);
    assert!(beads.records.iter().all(|r| r.beads.len() == 3));
    let v = VolumeFile::read(&out.join("vol00.vol")).unwrap();
    assert_eq!(v.volume.dims(), [199, 199, 199]);
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let config = Config {
        seed: 17,
        ..Config::default()
    };
    let (_a, out_a) = simulate(&config);
    let (_b, out_b) = simulate(&config);
    for name in ["vol03.vol", "vol11.vol", "poses.csv", "ground_truth.cal", "membrane_points.txt"] {
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn noiseless_calibration_matches_ground_truth() {
    let config = noiseless();
    let (dir, sim) = simulate(&config);
    let out = calibrate_in(&sim, &config, &dir.path().join("cal")).unwrap();
    let truth = CalibrationFile::read(&sim.join("ground_truth.cal")).unwrap();
    let cal = CalibrationFile::read(&dir.path().join("cal/calibration.cal")).unwrap();
    assert!((cal.u2pr.translation - truth.u2pr.translation).norm() < 1e-3);
    assert!(cal.u2pr.rotation_angle_to(&truth.u2pr).to_degrees() < 1e-3);
    // quantized rendering keeps the residual report near, not at, zero
    assert!(out.run.feature.max_distance_mm < 5e-3, "{:?}", out.run.feature);
    assert!(out.warnings.is_empty());
    let report = std::fs::read_to_string(dir.path().join("cal/calibration_report.txt")).unwrap();
    assert!(report.contains("[feature extraction precision]"));
    assert!(report.contains("condition_flag false"));
}

#[test]
fn membrane_missing_volume_is_skipped_with_a_warning() {
    let config = noiseless();
    let (dir, sim) = simulate(&config);
    let path = sim.join("vol04.vol");
    let mut v = VolumeFile::read(&path).unwrap();
    v.volume.data_mut().fill(20);
    v.write(&path).unwrap();
    let out = calibrate_in(&sim, &config, &dir.path().join("cal")).unwrap();
    assert_eq!(out.run.failures.len(), 1);
    assert_eq!(out.run.failures[0].0, "vol04");
    assert!(out.warnings[0].contains("vol04"));
    assert_eq!(out.run.problem.observations().len(), 11);
}

#[test]
fn manual_lines_replace_failed_detections() {
    let mut config = noiseless();
    let (dir, sim) = simulate(&config);
    let path = sim.join("vol04.vol");
    let original = VolumeFile::read(&path).unwrap();
    // an operator traces the line on the intact slices before they are lost
    let obs = membrane_calib::detect::extract_plane(
        &original.volume,
        &original.probe,
        &config.sos().unwrap(),
    )
    .unwrap();
    let mut blank = original.clone();
    blank.volume.data_mut().fill(20);
    blank.write(&path).unwrap();
    let text = format!(
        "pose_noise_rms = 0\nline_jitter = 0\nspeckle_sigma = 0\nseed = 5\nmanual_line.vol04.xy = {} {}\nmanual_line.vol04.zy = {} {}\n",
        obs.line_xy.rho,
        obs.line_xy.theta.to_degrees(),
        obs.line_zy.rho,
        obs.line_zy.theta.to_degrees()
    );
    config = Config::parse(&text).unwrap();
    let out = calibrate_in(&sim, &config, &dir.path().join("cal")).unwrap();
    assert!(out.run.failures.is_empty());
    assert_eq!(out.run.problem.observations().len(), 12);
}

#[test]
fn unmatched_volume_ids_are_rejected() {
    let config = noiseless();
    let (dir, sim) = simulate(&config);
    std::fs::copy(sim.join("vol00.vol"), sim.join("extra.vol")).unwrap();
    let err = calibrate_in(&sim, &config, &dir.path().join("cal")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("extra"));
}

#[test]
fn backtest_overlays_and_deltas() {
    let config = noiseless();
    let (dir, sim) = simulate(&config);
    calibrate_in(&sim, &config, &dir.path().join("cal")).unwrap();
    let run = |calib: &Path, out: &Path| {
        cmd_backtest(
            &sim,
            &sim.join("poses.csv"),
            &sim.join("precalib.txt"),
            calib,
            &config,
            out,
        )
        .unwrap()
    };
    let rows = run(&dir.path().join("cal/calibration.cal"), &dir.path().join("bt"));
    assert_eq!(rows.len(), 24);
    for r in &rows {
        assert!(r.distance_mm.unwrap() < 0.1 && r.angle_deg.unwrap() < 0.1, "{r:?}");
    }
    let img = read_pgm(&dir.path().join("bt/vol00_xy.pgm")).unwrap();
    assert_eq!((img.width, img.height), (199, 199));
    assert!(img.pixels.contains(&255));
    assert!(std::fs::read_to_string(dir.path().join("bt/backtest.txt")).unwrap().starts_with("id"));

    // shift the calibration 5 mm along the volume y axis, the membrane
    // normal of the first five protocol poses
    let mut cal = CalibrationFile::read(&sim.join("ground_truth.cal")).unwrap();
    cal.u2pr = cal.u2pr.compose(&RigidTransform::from_translation(Vector3::new(0.0, 5.0, 0.0)));
    let bad = dir.path().join("shifted.cal");
    std::fs::write(&bad, cal.to_text()).unwrap();
    let rows = run(&bad, &dir.path().join("bt2"));
    for r in rows.iter().filter(|r| ["vol00", "vol01", "vol02", "vol03", "vol04"].contains(&r.id.as_str())) {
        let d = r.distance_mm.unwrap();
        assert!((d - 5.0).abs() < 0.15, "{r:?}");
    }
}

#[test]
fn evaluate_identical_calibrations_and_bead_pairs() {
    let mut config = noiseless();
    config.beads = true;
    let (dir, sim) = simulate(&config);
    let cals = dir.path().join("cals");
    std::fs::create_dir(&cals).unwrap();
    for i in 0..10 {
        std::fs::copy(sim.join("ground_truth.cal"), cals.join(format!("c{i}.cal"))).unwrap();
    }
    let report = cmd_evaluate(&cals, Some(&sim.join("beads.txt")), &config, None).unwrap();
    assert!(report.contains("[calibration precision]"));
    assert!(report.contains("distance_mm   distance_vox      angle_deg"));
    assert!(report.contains("pairs  100"));
    let rms_line = report.lines().find(|l| l.starts_with("rms")).unwrap();
    assert!(rms_line.split_whitespace().skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{rms_line}");

    let single = dir.path().join("single");
    std::fs::create_dir(&single).unwrap();
    std::fs::copy(sim.join("ground_truth.cal"), single.join("c.cal")).unwrap();
    let err = cmd_evaluate(&single, None, &config, None).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn precalibrate_from_simulated_points() {
    let config = Config {
        membrane_sigma: 0.43,
        ..noiseless()
    };
    let (dir, sim) = simulate(&config);
    let out = dir.path().join("pre.txt");
    let file = cmd_precalibrate(&sim.join("membrane_points.txt"), &out).unwrap();
    assert!(file.rms > 0.43 * 0.7 && file.rms < 0.43 * 1.3, "{}", file.rms);
    let truth = config.scene().unwrap().ph2m;
    let normal_truth = truth.rotation.row(2).transpose();
    let normal = file.ph2m.rotation.row(2).transpose();
    assert!(normal_truth.dot(&normal).abs() > (0.5f64).to_radians().cos());
}

#[test]
fn precalibrate_rejects_degenerate_points() {
    let dir = TempDir::new().unwrap();
    let pts = dir.path().join("line.txt");
    std::fs::write(&pts, "0 0 0\n1 1 1\n2 2 2\n3 3 3\n").unwrap();
    let err = cmd_precalibrate(&pts, &dir.path().join("o.txt")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_membrane-calib"))
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let status = |c: &mut Command| c.output().unwrap().status.code().unwrap();
    assert_eq!(status(bin().arg("frobnicate")), 2);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(
        status(bin().args(["simulate", "--out"]).arg(dir.path().join("s")).arg("--config").arg(&cfg)),
        2
    );
    assert_eq!(
        status(bin().args(["precalibrate", "--points", "/nonexistent/p.txt", "--out"]).arg(dir.path().join("o"))),
        3
    );
    let pts = dir.path().join("pts.txt");
    std::fs::write(&pts, "0 0 0\n10 0 0\n0 10 0\n10 10 0.001\n").unwrap();
    let out = bin()
        .args(["precalibrate", "--points"])
        .arg(&pts)
        .arg("--out")
        .arg(dir.path().join("pre.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rms"));
}
