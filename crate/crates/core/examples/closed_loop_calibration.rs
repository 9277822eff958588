//! Simulates the twelve-pose protocol, extracts the membrane from every
//! volume and solves for the image-to-probe transform.
//!
//! `cargo run --release --example closed_loop_calibration [noisy]`

use membrane_calib::campaign::{calibrate, simulate_acquisitions, VolumeInput};
use membrane_calib::detect::{ExtractOptions, LineOverrides};
use membrane_calib::sim::{protocol_poses, NoiseModel, PhantomScene};
use membrane_calib::solver::SolverConfig;

fn main() {
    let noisy = std::env::args().nth(1).is_some_and(|a| a == "noisy");
    let noise = if noisy { NoiseModel::default() } else { NoiseModel::noiseless() };
    let scene = PhantomScene::default();
    let poses = protocol_poses(&scene, 11);
    let acquisitions = simulate_acquisitions(&scene, &noise, &poses, 12).unwrap();
    let inputs: Vec<VolumeInput> = acquisitions
        .iter()
        .map(|a| VolumeInput {
            id: &a.id,
            volume: &a.volume,
            probe: &scene.probe,
            sos: scene.sos,
            pose: a.measured_pose,
        })
        .collect();

    let run = calibrate(
        &inputs,
        &scene.ph2m,
        &|_| LineOverrides::default(),
        &ExtractOptions::default(),
        &SolverConfig::default(),
    )
    .unwrap();
    let r = &run.result;
    let dt = (r.u2pr.translation - scene.true_u2pr.translation).norm();
    let da = r.u2pr.rotation_angle_to(&scene.true_u2pr).to_degrees();
    println!("observations      {}", run.problem.observations().len());
    println!("failed detections {}", run.failures.len());
    println!("rms residual      {:.4} mm", r.rms_residual);
    println!("max residual      {:.4} mm", r.max_residual);
    println!("restarts agreeing {}", r.restarts_converged);
    println!("translation error {dt:.4} mm");
    println!("rotation error    {da:.4} deg");
    println!();
    print!("{}", run.feature.to_table("feature extraction precision"));
}
