//! Compares the Jacobian spectrum of the full protocol with a session that
//! repeats one pose, which leaves half the parameters unconstrained.

use membrane_calib::geometry::EulerPose;
use membrane_calib::sim::{degenerate_poses, exact_observation, protocol_poses, PhantomScene};
use membrane_calib::solver::{observability, CalibrationProblem};

fn main() {
    let scene = PhantomScene::default();
    let truth = EulerPose::from_transform(&scene.true_u2pr);
    for (name, poses) in [
        ("protocol", protocol_poses(&scene, 1)),
        ("repeated pose", degenerate_poses(&scene)),
    ] {
        let observations = poses
            .iter()
            .map(|p| exact_observation(&scene, p, 10).expect("membrane crosses both slices"))
            .collect();
        let problem = CalibrationProblem::new(observations, scene.ph2m, scene.scale).unwrap();
        let report = observability(&problem, &truth);
        println!("{name}");
        let values: Vec<String> = report.singular_values.iter().map(|s| format!("{s:.3e}")).collect();
        println!("  singular values {}", values.join(" "));
        println!("  min/max ratio   {:.3e}", report.ratio());
        println!("  rank            {}", report.numerical_rank());
        println!("  ill-conditioned {}", report.condition_flag);
    }
}
