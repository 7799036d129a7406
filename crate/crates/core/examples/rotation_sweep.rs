//! A small controlled-rotation sweep over the built-in models, printing the
//! per-value summary.
//!
//!     cargo run --release --example rotation_sweep -- [shapes] [instances]

use std::collections::HashSet;

use dugma::bench::{self, shapes, ExperimentConfig, Factor, FactorRanges};

fn main() -> dugma::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let n_shapes = args.next().unwrap_or(2).clamp(1, 5);
    let instances = args.next().unwrap_or(1);

    let models: Vec<_> = shapes::default_models(0, 1000)?.into_iter().take(n_shapes).collect();
    let cfg = ExperimentConfig {
        seed: 42,
        instances,
        values: Some(vec![-40.0, -8.0, 8.0, 40.0]),
        ..Default::default()
    };
    let records = bench::run_experiment(&models, Factor::Rotation, &FactorRanges::default(), &cfg, &HashSet::new(), |r| {
        eprintln!(
            "rotation {:>5} shape {} instance {}: rot_error {:.3} trans_error {:.3} {}",
            r.factor_value, r.shape_id, r.instance_id, r.rot_error, r.trans_error, r.success
        );
        Ok(())
    })?;

    println!("{:>8} {:>7} {:>9} {:>9}", "rotation", "success", "rot_mean", "time_s");
    for s in bench::summarize(&records) {
        println!(
            "{:>8} {:>6.0}% {:>9.4} {:>9.2}",
            s.factor_value,
            100.0 * s.success_rate,
            s.rot_error_mean,
            s.wall_time_mean
        );
    }
    Ok(())
}
