//! Registers noisy pairs twice: with the per-point noise covariances and with
//! identity covariances, and compares the rotation errors.
//!
//!     cargo run --release --example covariance_ablation -- [trials]

use dugma::bench::{shapes, synthesize_pair, TrialFactors};
use dugma::geometry::rotation_error;
use dugma::{register, RegistrationConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dugma::Result<()> {
    let trials: usize = std::env::args().nth(1).map_or(5, |a| a.parse().expect("integer argument"));
    let models = shapes::default_models(0, 1000)?;
    let config = RegistrationConfig::default();
    let (mut with, mut without) = (0.0, 0.0);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let factors = TrialFactors {
            rotation_deg: 15.0,
            noise_std_frac: 0.15,
            translation_frac: 0.1,
            ..TrialFactors::none()
        };
        let pair = synthesize_pair(&models[t % models.len()], &factors, &mut rng)?;
        let a = register(&pair.fixed, &pair.moving, &config)?;
        let b = register(
            &pair.fixed.with_unit_covariances(),
            &pair.moving.with_unit_covariances(),
            &config,
        )?;
        let (ea, eb) = (
            rotation_error(pair.truth.rotation(), a.transform.rotation()),
            rotation_error(pair.truth.rotation(), b.transform.rotation()),
        );
        println!("trial {t}: true covariances {ea:.4}, identity {eb:.4}");
        with += ea;
        without += eb;
    }
    let n = trials as f64;
    println!("mean rot_error: true covariances {:.4}, identity {:.4}", with / n, without / n);
    Ok(())
}
