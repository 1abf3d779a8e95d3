//! Perturb a history's increments and compare the change in the log Bayes
//! factor with the Lipschitz bound.
//!
//! cargo run --release --example stability_bounds -- [sigma] [seed]

use market_inference::analysis::{lipschitz_constants, stability_bound, GridSpec, ThetaGrid};
use market_inference::inference::{posterior_summary, PriorSpec};
use market_inference::model::{Interval, Outcome};
use market_inference::rng::rng_from_seed;
use market_inference::simulate::{perturb_increments, simulate_history, SimConfig};

fn main() -> market_inference::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sigma: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = PriorSpec::default();

    let h = simulate_history(&SimConfig::new(100, Outcome::One, seed))?;
    let pert = perturb_increments(&h, sigma, &mut rng_from_seed(seed + 1))?;
    let a = posterior_summary(&h, &spec, 0.5, 500, seed)?;
    let b = posterior_summary(&pert.history, &spec, 0.5, 500, seed)?;

    let grid = ThetaGrid::from_prior(&spec, 64, &mut rng_from_seed(seed + 2));
    let v_max = h.volumes().iter().copied().fold(0.0, f64::max);
    let lip = lipschitz_constants(&grid, 2.0, Interval::new(0.0, v_max), &GridSpec { x_points: 801, v_points: 60, step: 1e-5 })?;
    let mut rep = stability_bound(&h, &pert.history, lip.r, lip.lx, lip.lv)?;
    rep.observed_bf_diff = Some((a.log_bf - b.log_bf).abs());

    println!("sigma                 {sigma}");
    println!("theta grid            {}", lip.theta_grid);
    println!("L_x(R), L_v(R)        {:.3}, {:.3} at R = {}", lip.lx, lip.lv, lip.r);
    println!("sum |dx - dx'|        {:.4}", rep.sum_abs_dx_diff);
    println!("on truncation event   {}", rep.on_event);
    println!("log BF (base, pert)   {:.4}, {:.4}", a.log_bf, b.log_bf);
    println!("|delta log BF|        {:.4}", rep.observed_bf_diff.unwrap_or(f64::NAN));
    println!("bound                 {:.4}", rep.bf_bound);
    println!("posterior bound       {:.4}", rep.posterior_bound);
    println!("contained             {:?}", rep.contained());
    Ok(())
}
