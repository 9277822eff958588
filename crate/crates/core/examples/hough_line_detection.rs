//! Detects a speckled membrane line in a synthetic slice, first from the
//! Hough accumulator alone and then refined along the ridge.

use membrane_calib::detect::{detect_line, hough_lines, hough_threshold, Line2D};
use membrane_calib::volume::Slice2D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let (w, h) = (199, 199);
    let truth = Line2D::new(95.0, 125f64.to_radians());
    let sigma = 3.0 / (8.0 * 2f64.ln()).sqrt();
    let speckle = Normal::new(0.0, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pixels = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = truth.signed_distance(u as f64, v as f64);
            let clean = 20.0 + 235.0 * (-(d * d) / (2.0 * sigma * sigma)).exp();
            pixels.push((clean * (1.0 + speckle.sample(&mut rng))).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = Slice2D::from_pixels(w, h, pixels).unwrap();

    let threshold = hough_threshold(&img);
    let hough = hough_lines(&img, threshold).unwrap();
    let refined = detect_line(&img, threshold, 6).unwrap();
    println!("threshold {threshold:.1}");
    println!("{:<8} {:>10} {:>10}", "", "rho_px", "theta_deg");
    for (name, line) in [("truth", truth), ("hough", hough), ("refined", refined)] {
        println!("{name:<8} {:>10.3} {:>10.3}", line.rho, line.theta.to_degrees());
    }
}
