//! Ten noisy calibrations of one scene plus a bead phantom session,
//! summarized as feature precision, calibration precision and
//! reconstruction accuracy.
//!
//! `cargo run --release --example evaluation_campaign [seed]`

use membrane_calib::campaign::{run_campaign, CampaignConfig};
use membrane_calib::sim::{BeadPhantom, PhantomScene};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let scene = PhantomScene::default();
    let phantom = BeadPhantom::new(60.0, 10.0);
    let cfg = CampaignConfig {
        seed,
        ..CampaignConfig::default()
    };
    let report = run_campaign(&scene, &phantom, &cfg).unwrap();
    println!("calibrations       {}", report.calibrations.len());
    println!("failed detections  {}", report.detection_failures);
    println!();
    print!("{}", report.to_text());
}
