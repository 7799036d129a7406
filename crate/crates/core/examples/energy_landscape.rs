//! Evaluates the M-step objective along a rotation about z for a fixed
//! coefficient matrix, and compares the analytic gradient with central
//! differences.

use dugma::bench::shapes;
use dugma::energy::{objective, objective_gradient, pair_coefficients, EnergyContext};
use dugma::geometry::{PoseParams, RigidTransform, Vec3};

fn main() -> dugma::Result<()> {
    let fixed = shapes::model(shapes::ShapeKind::Drill, 0, 300)?.scale_covariances(0.05 * 0.05)?;
    let truth = RigidTransform::from_axis_angle(&Vec3::z(), 0.4, Vec3::zeros());
    let moving = truth.inverse().apply(&fixed)?;
    // Coefficients frozen at the true pose, as after a good E-step.
    let coeffs = pair_coefficients(&fixed, &truth.apply(&moving)?)?;
    let ctx = EnergyContext::new(fixed, moving, coeffs)?.at_pose(truth.to_params());

    println!("{:>7} {:>14}", "angle", "objective");
    for k in 0..=16 {
        let angle = k as f64 * 0.05;
        let p = PoseParams {
            dim: 3,
            rotation: Vec3::z() * angle,
            translation: Vec3::zeros(),
        };
        let marker = if (angle - 0.4).abs() < 1e-9 { "  <- truth" } else { "" };
        println!("{angle:>7.2} {:>14.6e}{marker}", objective(&p, &ctx));
    }

    let p = PoseParams {
        dim: 3,
        rotation: Vec3::new(0.1, -0.2, 0.3),
        translation: Vec3::new(0.05, 0.0, -0.02),
    };
    let g = objective_gradient(&p, &ctx);
    let x = p.to_vec();
    println!("\n{:>3} {:>14} {:>14}", "k", "analytic", "central diff");
    for (k, gk) in g.iter().enumerate() {
        let h = 1e-6;
        let at = |d: f64| {
            let mut y = x.clone();
            y[k] += d;
            objective(&PoseParams::from_slice(3, &y).unwrap(), &ctx)
        };
        println!("{k:>3} {gk:>14.6e} {:>14.6e}", (at(h) - at(-h)) / (2.0 * h));
    }
    Ok(())
}
