//! Writes a simulated session to disk, calibrates it and renders the
//! computed membrane lines over the extraction slices as PGM images.
//!
//! `cargo run --release --example backtest_overlay [out_dir]`

use std::path::PathBuf;

use membrane_calib::cli::{cmd_backtest, cmd_calibrate, cmd_simulate, Config};

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("membrane-backtest"));
    let _ = std::fs::remove_dir_all(&root);
    let config = Config {
        seed: 9,
        ..Config::default()
    };
    let session = root.join("session");
    cmd_simulate(&config, &session).unwrap();
    let poses = session.join("poses.csv");
    let precalib = session.join("precalib.txt");
    cmd_calibrate(&session, &poses, &precalib, &config, &root.join("calibration")).unwrap();
    let rows = cmd_backtest(
        &session,
        &poses,
        &precalib,
        &root.join("calibration/calibration.cal"),
        &config,
        &root.join("backtest"),
    )
    .unwrap();

    println!("{:<6} {:<5} {:>12} {:>10}", "id", "slice", "distance_mm", "angle_deg");
    for r in &rows {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!("{:<6} {:<5} {:>12} {:>10}", r.id, r.slice.label(), show(r.distance_mm), show(r.angle_deg));
    }
    println!("overlays in {}", root.join("backtest").display());
}
