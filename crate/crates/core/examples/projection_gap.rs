//! Projection gap at the default parameters over a simulated volume path.
//!
//! cargo run --release --example projection_gap -- [T] [seed]

use market_inference::klgap::{projection_gap, GapSettings};
use market_inference::model::{ModelParams, Outcome};
use market_inference::rng::rng_from_seed;
use market_inference::simulate::{sample_volumes, VolumeDesign};

fn main() -> market_inference::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let horizon: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(11);
    let mut rng = rng_from_seed(seed);
    let v = sample_volumes(&VolumeDesign::default(), horizon, &mut rng)?;
    let theta = ModelParams::paper_defaults();
    let started = std::time::Instant::now();
    let g = projection_gap((Outcome::One, &theta), &v, &GapSettings::default(), &mut rng)?;
    println!("delta_T      = {:.5} +- {:.5} nats/period", g.delta_t, g.std_error);
    println!("at theta*    = {:.5} +- {:.5}", g.flipped_value, g.flipped_std_error);
    println!("converged    = {}", g.converged);
    println!("elapsed      = {:.1?}", started.elapsed());
    for r in &g.restarts {
        println!("  start {:>9.5} -> {:>9.5} ({} evals{})", r.start_objective, r.best_objective, r.evaluations, if r.from_truth { ", truth" } else { "" });
    }
    println!("{}", g.argmin_theta.to_kv());
    Ok(())
}
