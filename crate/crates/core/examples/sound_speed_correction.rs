//! Water sound speed over temperature and the radial correction of a
//! voxel imaged through a water bath.

use membrane_calib::geometry::ScaleVector;
use membrane_calib::sos::{correct_point, distort_point, water_sos, ProbeGeometry, SosContext};
use nalgebra::Vector3;

fn main() {
    println!("temperature_c  water_m_per_s");
    for t in (0..=60).step_by(10) {
        println!("{t:>13}  {:>13.3}", water_sos(t as f64).unwrap());
    }

    let scale = ScaleVector::isotropic(0.477).unwrap();
    let probe = ProbeGeometry::new(Vector3::new(99.0, -40.0, 99.0), 15.0).unwrap();
    let ctx = SosContext::from_temperature(23.0, 1540.0).unwrap();
    println!();
    println!("ratio v_tissue / v_water at 23 C: {:.5}", ctx.ratio());

    let displayed = Vector3::new(120.0, 150.0, 80.0);
    let corrected = correct_point(&displayed, &scale, &probe, &ctx).unwrap();
    let back = distort_point(&corrected, &scale, &probe, &ctx).unwrap();
    let shift = scale.to_metric(&(corrected - displayed)).norm();
    println!("displayed voxel  {:?}", displayed.as_slice());
    println!("corrected voxel  [{:.3}, {:.3}, {:.3}]", corrected.x, corrected.y, corrected.z);
    println!("shift            {shift:.3} mm");
    println!("round trip error {:.2e} voxels", (back - displayed).norm());
}
