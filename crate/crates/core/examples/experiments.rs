//! Small versions of the four synthetic experiments, written to a directory.
//!
//! cargo run --release --example experiments -- [out_dir] [replications]

use std::path::PathBuf;

use market_inference::harness::{emit_outputs, run_experiment, ExperimentConfig, ExperimentKind};

fn main() -> market_inference::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().cloned().unwrap_or_else(|| "experiments-out".into()));
    let reps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);

    for kind in [
        ExperimentKind::Concentration,
        ExperimentKind::Identifiability,
        ExperimentKind::Stability,
        ExperimentKind::Infogain,
        ExperimentKind::Predicate,
    ] {
        let mut cfg = ExperimentConfig::desk(kind);
        cfg.replications = reps;
        cfg.particles = 200;
        cfg.lipschitz_theta_draws = 32;
        cfg.omega1_grid = vec![0.05, 0.2, 0.5];
        if kind == ExperimentKind::Infogain {
            cfg.horizon = 200;
            cfg.t_grid = vec![1, 10, 25, 50, 100, 200];
        }
        let started = std::time::Instant::now();
        let out = run_experiment(&cfg)?;
        let files = emit_outputs(&out, &dir)?;
        println!("{} ({:.1?}) -> {}", kind.name(), started.elapsed(), files.summary.display());
        for r in &out.summary.rows {
            println!(
                "  {} = {:<6} median {:>10.4}  [{:>10.4}, {:>10.4}]{}",
                kind.grid_label(),
                r.grid_point,
                r.median,
                r.q10,
                r.q90,
                r.rate.map_or(String::new(), |x| format!("  rate {x:.3}"))
            );
        }
        for key in ["median_slope", "mean_sigma_correlation", "lx_R", "R"] {
            if let Some(v) = out.summary.extra.get(key) {
                println!("  {key} = {v}");
            }
        }
    }
    Ok(())
}
