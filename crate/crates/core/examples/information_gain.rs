//! Realized information gain along one history, and the Monte Carlo
//! mutual information for a fixed volume path.
//!
//! cargo run --release --example information_gain -- [T] [seed]

use market_inference::analysis::{expected_ig, ig_cap, ig_from_log_bf};
use market_inference::inference::{sequential_log_bf, PriorSpec, SmcSettings};
use market_inference::logodds::to_increments;
use market_inference::model::{ModelParams, Outcome};
use market_inference::simulate::{simulate_history, SimConfig};

fn main() -> market_inference::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let horizon: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = PriorSpec::default();
    let prior = 0.5;

    let h = simulate_history(&SimConfig::new(horizon, Outcome::One, seed))?;
    let inc = to_increments(&h)?;
    let lbf = sequential_log_bf(&inc, h.volumes(), &spec, &SmcSettings::new(500), seed)?;
    println!("cap log 2 = {:.4}", ig_cap(prior));
    for t in [1, 10, 25, 50, 100, 200, 300, 400, 600].into_iter().filter(|&t| t <= horizon) {
        println!("t = {t:>4}  log BF = {:>8.3}  IG = {:.4}", lbf[t - 1], ig_from_log_bf(lbf[t - 1], prior)?);
    }

    let theta = ModelParams::paper_defaults();
    let v = h.volumes()[..50].to_vec();
    let mi = expected_ig(&theta, &v, prior, 40, &spec, 300, seed)?;
    println!("\nI(Y; increments | volumes), T = 50: {:.4} +- {:.4} ({} runs)", mi.mean, mi.std_error, mi.n);
    Ok(())
}
