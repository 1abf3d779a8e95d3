//! Command-line front end: simulate histories, infer outcomes, estimate
//! projection gaps, run experiments and validate parameter files.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use market_inference::harness::{emit_outputs, run_experiment, ExperimentConfig, ExperimentKind};
use market_inference::inference::{posterior_summary, PriorSpec};
use market_inference::klgap::{projection_gap, GapSettings};
use market_inference::kv::KvRecord;
use market_inference::logodds::to_increments;
use market_inference::model::{validate_params, ModelParams, Outcome, ParamBounds};
use market_inference::rng::{derive_seed, rng_from_seed};
use market_inference::simulate::{read_history_csv, sample_volumes, simulate_history, write_history_csv, SimConfig, VolumeDesign};
use market_inference::vi::{vi_log_bf, ViOptions};
use market_inference::Error;

#[derive(Parser)]
#[command(name = "pmi", version, about = "Outcome inference from prediction-market histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value file (parameters, or an experiment config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory; stdout when omitted where applicable.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a price-volume history and write it as `t,p,v` CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        outcome: u8,
        #[arg(long, default_value_t = 0.5)]
        p0: f64,
        /// Constant volume instead of the Gamma(2, 0.5) design.
        #[arg(long)]
        volume: Option<f64>,
    },
    /// Posterior outcome probability for a history CSV.
    Infer {
        #[command(flatten)]
        common: Common,
        /// History CSV with columns `t,p,v`.
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value = "default")]
        prior: String,
        #[arg(long, default_value_t = 0.5)]
        prior_p1: f64,
        #[arg(long, value_enum, default_value_t = Method::Smc)]
        method: Method,
    },
    /// Projection gap for a parameter file over a simulated volume path.
    Klgap {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        outcome: u8,
        /// Truth draws per period.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Allow negative drift magnitudes in the search.
        #[arg(long)]
        free_orientation: bool,
    },
    /// Run one experiment kind and write records, summary and plot.
    Experiment {
        kind: String,
        #[command(flatten)]
        common: Common,
        /// Full-size design (1000 replications, 1000 particles, full grids).
        #[arg(long)]
        paper_scale: bool,
    },
    /// Check a parameter file against the admissibility constraints.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Smc,
    Vi,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Config file (if any) with `--set` overrides applied on top.
fn load_kv(common: &Common) -> Result<KvRecord, Failure> {
    let mut rec = match &common.config {
        Some(p) => KvRecord::read(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => KvRecord::new(),
    };
    for item in &common.overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| config_err(format!("--set expects key=value, got `{item}`")))?;
        rec.set(k.trim(), v.trim());
    }
    Ok(rec)
}

fn load_params(common: &Common) -> Result<ModelParams, Failure> {
    let rec = load_kv(common)?;
    if let Some(k) = rec.keys().find(|k| !ModelParams::is_param_key(k)) {
        return Err(config_err(format!("unknown parameter key `{k}`")));
    }
    let theta = ModelParams::paper_defaults().overridden_by(&rec)?;
    let report = validate_params(&theta, &ParamBounds::default());
    if !report.is_empty() {
        return Err(config_err(format!("inadmissible parameters:\n{report}")));
    }
    Ok(theta)
}

fn outcome(y: u8) -> Result<Outcome, Failure> {
    Ok(Outcome::from_u8(y)?)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate { common, horizon, outcome: y, p0, volume } => {
            let theta = load_params(&common)?;
            let cfg = SimConfig {
                p0,
                theta,
                design: volume.map_or_else(VolumeDesign::default, VolumeDesign::Constant),
                ..SimConfig::new(horizon, outcome(y)?, common.seed.unwrap_or(1))
            };
            let h = simulate_history(&cfg)?;
            let mut buf = Vec::new();
            write_history_csv(&h, &mut buf)?;
            write_text(common.out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Infer { common, history, prior, prior_p1, method } => {
            let spec = PriorSpec::from_name(&prior)?;
            let f = File::open(&history).map_err(|e| config_err(format!("{}: {e}", history.display())))?;
            let h = read_history_csv(BufReader::new(f))?;
            let seed = common.seed.unwrap_or(1);
            let rec = match method {
                Method::Smc => posterior_summary(&h, &spec, prior_p1, common.particles.unwrap_or(1000), seed)?.to_kv(),
                Method::Vi => {
                    let inc = to_increments(&h)?;
                    let bf = vi_log_bf(&inc, h.volumes(), &spec, &ViOptions::default(), seed)?;
                    let mut r = bf.to_kv();
                    let z = market_inference::logodds::logit(prior_p1)? + bf.approx_log_bf;
                    r.set_f64("prior_p1", prior_p1);
                    r.set_f64("posterior_log_odds", z);
                    r.set_f64("posterior_p1", market_inference::logodds::sigmoid(z)?);
                    r
                }
            };
            write_text(common.out.as_deref(), &rec.to_string())
        }
        Command::Klgap { common, horizon, outcome: y, samples, restarts, free_orientation } => {
            let theta = load_params(&common)?;
            let mut settings = GapSettings::default();
            if let Some(m) = samples {
                settings.samples = m;
                settings.search_samples = settings.search_samples.min(m);
            }
            if let Some(r) = restarts {
                settings.restarts = r;
            }
            if free_orientation {
                settings = settings.without_orientation();
            }
            let seed = common.seed.unwrap_or(1);
            let mut rng = rng_from_seed(derive_seed(seed, 0x6A9));
            let v = sample_volumes(&VolumeDesign::default(), horizon, &mut rng)?;
            let gap = projection_gap((outcome(y)?, &theta), &v, &settings, &mut rng)?;
            match common.out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
                    gap.to_kv().write(dir.join("klgap.txt"))?;
                    gap.write_per_step_csv(dir.join("klgap_per_step.csv"), &v)?;
                    println!("delta_t = {:.6} +- {:.6}", gap.delta_t, gap.std_error);
                    Ok(())
                }
                None => write_text(None, &gap.to_kv().to_string()),
            }
        }
        Command::Experiment { kind, common, paper_scale } => {
            let kind = ExperimentKind::from_name(&kind)?;
            let mut cfg = if paper_scale { ExperimentConfig::paper(kind) } else { ExperimentConfig::desk(kind) };
            let mut rec = load_kv(&common)?;
            if let Some(k) = rec.get("kind") {
                if k != kind.name() {
                    return Err(config_err(format!("config is for `{k}`, command asks for `{}`", kind.name())));
                }
            }
            if let Some(s) = common.seed {
                rec.set("base_seed", s);
            }
            if let Some(r) = common.replications {
                rec.set("replications", r);
            }
            if let Some(n) = common.particles {
                rec.set("particles", n);
            }
            if let Some(scale) = rec.get("scale") {
                cfg = match scale {
                    "paper" => ExperimentConfig::paper(kind),
                    "desk" => ExperimentConfig::desk(kind),
                    other => return Err(config_err(format!("unknown scale `{other}`"))),
                };
            }
            cfg.apply_overrides(&rec)?;
            let dir = common.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            cfg.out_dir = Some(dir.clone());
            cfg.validate()?;
            let out = run_experiment(&cfg)?;
            let files = emit_outputs(&out, &dir)?;
            for r in &out.summary.rows {
                println!(
                    "{} = {:<8} n = {:<5} median = {:<12.6} q10 = {:<12.6} q90 = {:<12.6}{}",
                    kind.grid_label(),
                    r.grid_point,
                    r.n,
                    r.median,
                    r.q10,
                    r.q90,
                    r.rate.map_or(String::new(), |x| format!(" rate = {x:.4}"))
                );
            }
            println!("wrote {}", files.records.display());
            Ok(())
        }
        Command::Validate { common } => {
            let rec = load_kv(&common)?;
            if let Some(k) = rec.keys().find(|k| !ModelParams::is_param_key(k)) {
                return Err(config_err(format!("unknown parameter key `{k}`")));
            }
            let theta = ModelParams::paper_defaults().overridden_by(&rec)?;
            let report = validate_params(&theta, &ParamBounds::default());
            print!("{report}");
            if report.is_empty() {
                Ok(())
            } else {
                Err(config_err(format!("{} violation(s)", report.violations.len())))
            }
        }
    }
}
