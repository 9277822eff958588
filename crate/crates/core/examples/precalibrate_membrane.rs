//! Locates the membrane plane in phantom space from digitized support
//! points, a few of them grossly misplaced.

use membrane_calib::geometry::precalibrate_membrane;
use membrane_calib::sim::{membrane_surface_points, PhantomScene};
use nalgebra::Vector3;

fn main() {
    let scene = PhantomScene::default();
    let mut points = membrane_surface_points(&scene, 200, 40.0, 0.43, 7);
    // slips of the pointer tip during digitization
    for p in points.iter_mut().step_by(25) {
        *p += Vector3::new(0.0, 0.0, 6.0);
    }

    let pre = precalibrate_membrane(&points).expect("plane fit");
    let truth = scene.ph2m;
    let normal = pre.ph2m.rotation.row(2).transpose();
    let normal_truth = truth.rotation.row(2).transpose();
    let angle = normal.dot(&normal_truth).abs().min(1.0).acos().to_degrees();
    let true_origin = truth.inverse().apply(&Vector3::zeros());
    let offset = pre.ph2m.apply(&true_origin).z.abs();

    println!("points          {}", points.len());
    println!("outliers        {}", pre.fit.outlier_count());
    println!("rms residual    {:.3} mm", pre.rms());
    println!("normal error    {angle:.4} deg");
    println!("offset error    {offset:.4} mm");
}
