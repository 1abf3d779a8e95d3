//! Simulate a history and compute the outcome posterior with SMC.
//!
//! cargo run --release --example posterior_smc -- [T] [particles] [seed]

use std::time::Instant;

use market_inference::inference::{posterior_summary, PriorSpec};
use market_inference::model::Outcome;
use market_inference::simulate::{simulate_history, SimConfig};

fn main() -> market_inference::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let horizon = args.first().copied().unwrap_or(100) as usize;
    let particles = args.get(1).copied().unwrap_or(1000) as usize;
    let seed = args.get(2).copied().unwrap_or(1);

    let h = simulate_history(&SimConfig::new(horizon, Outcome::One, seed))?;
    let start = Instant::now();
    let s = posterior_summary(&h, &PriorSpec::default(), 0.5, particles, seed)?;
    println!("T = {horizon}, N = {particles}, true outcome y = 1");
    println!("terminal price     {:.4}", h.prices()[horizon]);
    println!("log m1, log m0     {:.4}, {:.4}", s.log_m1, s.log_m0);
    println!("log Bayes factor   {:.4}", s.log_bf);
    println!("posterior P(y=1)   {:.6}", s.posterior_p1);
    println!("min ESS            {:.1}", s.ess_min);
    println!("elapsed            {:.2?}", start.elapsed());
    Ok(())
}
