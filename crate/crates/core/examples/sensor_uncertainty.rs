//! Depth-sensor uncertainty as a function of incidence angle and depth, and
//! the covariance it induces.

use dugma::uncertainty::{covariance_from_uncertainty, sensor_uncertainty, SensorModelParams};

fn main() -> dugma::Result<()> {
    let params = SensorModelParams::default();
    println!("w1={} w2={}", params.w1, params.w2);
    print!("{:>8}", "deg\\m");
    let depths = [0.5, 1.0, 2.0, 3.0, 4.0];
    for d in depths {
        print!("{d:>9}");
    }
    println!();
    for deg in [0.0, 15.0, 30.0, 45.0, 60.0, 75.0] {
        print!("{deg:>8}");
        for d in depths {
            print!("{:>9.4}", sensor_uncertainty(f64::to_radians(deg), d, &params)?);
        }
        println!();
    }

    let u = sensor_uncertainty(std::f64::consts::FRAC_PI_4, 2.0, &params)?;
    println!("\ncovariance at 45°, 2 m (3D):{:.4}", covariance_from_uncertainty(u, 3)?);

    let calibrated = SensorModelParams::from_calibration(2.2)?;
    println!(
        "weights calibrated to U(60°,0)=2.2: w1={:.5} w2={:.5}",
        calibrated.w1, calibrated.w2
    );
    Ok(())
}
