//! The bound-constrained quasi-Newton solver on the Rosenbrock function,
//! with and without a box.

use dugma::solver::{minimize, SolverOptions};

fn rosenbrock(x: &[f64]) -> f64 {
    (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
}

fn gradient(x: &[f64]) -> Vec<f64> {
    vec![
        -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
        200.0 * (x[1] - x[0] * x[0]),
    ]
}

fn main() -> dugma::Result<()> {
    let free = SolverOptions {
        max_inner_iters: 200,
        ..Default::default()
    };
    let m = minimize(rosenbrock, gradient, &[-1.2, 1.0], &free)?;
    println!("free:  x={:.6?} f={:.3e} {:?} after {} iterations", m.x, m.value, m.status, m.iterations);

    let boxed = SolverOptions {
        param_bounds: Some(vec![(-2.0, 0.5), (-2.0, 2.0)]),
        ..free
    };
    let m = minimize(rosenbrock, gradient, &[-1.2, 1.0], &boxed)?;
    println!("boxed: x={:.6?} f={:.3e} {:?} after {} iterations", m.x, m.value, m.status, m.iterations);
    Ok(())
}
