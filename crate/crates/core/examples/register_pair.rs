//! Synthesizes a perturbed pair from a built-in model, registers it and
//! prints the EM trace.
//!
//!     cargo run --release --example register_pair -- [rotation_deg] [noise_frac] [seed]

use dugma::bench::{is_success, shapes, synthesize_pair, TrialFactors};
use dugma::geometry::{rotation_error, translation_error};
use dugma::{register, RegistrationConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dugma::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let rotation = args.first().copied().unwrap_or(30.0);
    let noise = args.get(1).copied().unwrap_or(0.05);
    let seed = args.get(2).copied().unwrap_or(1.0) as u64;

    let model = shapes::model(shapes::ShapeKind::Chair, seed, 1000)?;
    let factors = TrialFactors {
        rotation_deg: rotation,
        noise_std_frac: noise,
        outliers: 50,
        sample_rate_fixed: 0.9,
        sample_rate_moving: 0.85,
        translation_frac: 0.1,
        ..TrialFactors::none()
    };
    let pair = synthesize_pair(&model, &factors, &mut ChaCha8Rng::seed_from_u64(seed))?;
    println!("fixed {} points, moving {} points", pair.fixed.len(), pair.moving.len());

    let res = register(&pair.fixed, &pair.moving, &RegistrationConfig::default())?;
    println!("{:>4} {:>10} {:>12} {:>10} {:>8}", "iter", "sigma", "objective", "rot_step", "pairs");
    for r in &res.trace {
        println!(
            "{:>4} {:>10.3e} {:>12.5e} {:>10.2e} {:>8}",
            r.iteration, r.sigma, r.objective, r.rotation_step, r.active_pairs
        );
    }
    let re = rotation_error(pair.truth.rotation(), res.transform.rotation());
    let te = translation_error(pair.truth.translation(), res.transform.translation());
    println!("converged={} rot_error={re:.4} trans_error={te:.4} success={}", res.converged, is_success(re, te));
    Ok(())
}
