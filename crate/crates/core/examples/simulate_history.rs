//! Simulate a history under each outcome and write both as CSV.
//!
//! cargo run --release --example simulate_history -- [T] [seed] [out_dir]

use std::fs::File;
use std::path::PathBuf;

use market_inference::logodds::to_increments;
use market_inference::model::{effective_informativeness, ModelParams, Outcome};
use market_inference::simulate::{simulate_history, write_history_csv, SimConfig, VolumeDesign};

fn main() -> market_inference::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let horizon: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let dir = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| ".".into()));

    for y in [Outcome::One, Outcome::Zero] {
        let cfg = SimConfig { design: VolumeDesign::GammaIid { shape: 2.0, scale: 0.5 }, ..SimConfig::new(horizon, y, seed) };
        let h = simulate_history(&cfg)?;
        let inc = to_increments(&h)?;
        let drift: f64 = inc.dx.iter().sum::<f64>() / horizon as f64;
        let path = dir.join(format!("history_y{}.csv", y.as_u8()));
        write_history_csv(&h, File::create(&path)?)?;
        println!(
            "y = {}: final price {:.4}, mean increment {:+.4}, mean volume {:.3} -> {}",
            y.as_u8(),
            h.prices()[horizon],
            drift,
            h.volumes().iter().sum::<f64>() / horizon as f64,
            path.display()
        );
    }

    let theta = ModelParams::paper_defaults();
    println!("\ngate-weighted drift separation by volume");
    for v in [0.1, 0.5, 1.0, 2.0, 5.0, 6.0, 10.0] {
        println!("  v = {v:>4}: {:+.5}", effective_informativeness(v, &theta));
    }
    Ok(())
}
