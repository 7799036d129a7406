//! Rigid transforms on clouds with covariances, and the error metrics used to
//! score registrations.

use dugma::geometry::{rotation_error, translation_error, Mat3, PointCloud, RigidTransform, Vec3};

fn main() -> dugma::Result<()> {
    let cov = Mat3::from_diagonal(&Vec3::new(0.04, 0.01, 0.01));
    let cloud = PointCloud::new(3, vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)], vec![cov; 2])?;

    let t = RigidTransform::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2, Vec3::new(0.0, 0.0, 1.0));
    let moved = t.apply(&cloud)?;
    for p in moved.points() {
        println!("point ({:.3}, {:.3}, {:.3})", p.x, p.y, p.z);
    }
    println!("covariance follows the rotation:{:.4}", moved.covariances()[0]);
    println!(
        "det before {:.6}, after {:.6}",
        cov.determinant(),
        moved.covariances()[0].determinant()
    );

    let back = t.inverse().compose(&t);
    println!("inverse ∘ t: rot_error {:.2e}", rotation_error(&Mat3::identity(), back.rotation()));

    for deg in [1.0f64, 10.0, 90.0, 180.0] {
        let r = RigidTransform::from_axis_angle(&Vec3::x(), deg.to_radians(), Vec3::zeros());
        println!(
            "{deg:>5}°: rot_error {:.6} (2√2·sin(θ/2) = {:.6})",
            rotation_error(&Mat3::identity(), r.rotation()),
            2.0 * 2f64.sqrt() * (deg.to_radians() / 2.0).sin()
        );
    }
    println!("trans_error {}", translation_error(&Vec3::zeros(), &Vec3::new(0.03, 0.04, 0.0)));

    let planar = RigidTransform::planar(0.5, 1.0, -1.0);
    println!("planar transform, dim {}:{:.4}", planar.dim(), planar.rotation());
    Ok(())
}
