//! Compare the SMC log Bayes factor with the variational ELBO difference.
//!
//! cargo run --release --example variational_bf -- [replications] [T]

use std::time::Instant;

use market_inference::inference::{posterior_summary, PriorSpec};
use market_inference::logodds::to_increments;
use market_inference::model::Outcome;
use market_inference::simulate::{simulate_history, SimConfig};
use market_inference::vi::{vi_log_bf, ViOptions};

fn main() -> market_inference::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let reps = args.first().copied().unwrap_or(10);
    let horizon = args.get(1).copied().unwrap_or(100);
    let spec = PriorSpec::default();
    let opts = ViOptions::default();

    println!("{:>4} {:>12} {:>14} {:>6} {:>10}", "rep", "smc log BF", "vi approx BF", "agree", "vi iters");
    let mut agree = 0;
    let start = Instant::now();
    for r in 0..reps as u64 {
        let h = simulate_history(&SimConfig::new(horizon, Outcome::One, 500 + r))?;
        let smc = posterior_summary(&h, &spec, 0.5, 1000, 500 + r)?;
        let inc = to_increments(&h)?;
        let vi = vi_log_bf(&inc, h.volumes(), &spec, &opts, 500 + r)?;
        let same = (smc.log_bf > 0.0) == (vi.approx_log_bf > 0.0);
        agree += same as usize;
        println!(
            "{r:>4} {:>12.4} {:>14.4} {:>6} {:>5}/{:<5}",
            smc.log_bf, vi.approx_log_bf, same, vi.fit_y1.iterations, vi.fit_y0.iterations
        );
    }
    println!("sign agreement {agree}/{reps} in {:.1?}", start.elapsed());
    Ok(())
}
