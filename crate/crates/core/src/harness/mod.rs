//! Synthetic experiments: replication drivers, per-grid-point summaries,
//! the design-based separation predicate and output files.

mod config;
mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

pub use config::{ExperimentConfig, ExperimentKind, OmegaSplit};
pub use plot::render_svg;

use crate::analysis::{ig_from_log_bf, lipschitz_constants, stability_bound, ThetaGrid};
use crate::error::{Error, Result};
use crate::inference::{posterior_from_increments, sequential_log_bf, SmcSettings};
use crate::klgap::projection_gap;
use crate::kv::KvRecord;
use crate::logodds::{logit, sigmoid, softplus, to_increments, History};
use crate::model::{gate_weights, Interval, ModelParams, Outcome};
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulate::{perturb_increments, sample_volumes, simulate_history, SimConfig, VolumeDesign};

/// One row per (grid point, replication).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub kind: ExperimentKind,
    pub replication: usize,
    pub grid_point: f64,
    pub seed: u64,
    pub truth: Outcome,
    pub posterior_p1: f64,
    pub log_bf: f64,
    pub ig: f64,
    /// Values for `kind.aux_columns()`, in order.
    pub aux: Vec<f64>,
}

impl ExperimentRecord {
    pub fn header(kind: ExperimentKind) -> String {
        let mut h = String::from("kind,replication,grid_point,seed,truth,posterior_p1,log_bf,ig");
        for c in kind.aux_columns() {
            h.push(',');
            h.push_str(c);
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.kind.name(),
            self.replication,
            fmt17(self.grid_point),
            self.seed,
            self.truth.as_u8(),
            fmt17(self.posterior_p1),
            fmt17(self.log_bf),
            fmt17(self.ig)
        );
        for x in &self.aux {
            s.push(',');
            s.push_str(&fmt17(*x));
        }
        s
    }

    /// Parses a row written by [`csv_row`](Self::csv_row).
    pub fn parse_row(kind: ExperimentKind, line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split(',').collect();
        let want = 8 + kind.aux_columns().len();
        if cells.len() != want {
            return Err(Error::Parse(format!("expected {want} columns, got {}", cells.len())));
        }
        if cells[0] != kind.name() {
            return Err(Error::Parse(format!("row kind `{}` is not `{}`", cells[0], kind.name())));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i].parse::<f64>().map_err(|_| Error::Parse(format!("column {i}: bad number `{}`", cells[i])))
        };
        let u = |i: usize| -> Result<u64> {
            cells[i].parse::<u64>().map_err(|_| Error::Parse(format!("column {i}: bad integer `{}`", cells[i])))
        };
        Ok(Self {
            kind,
            replication: u(1)? as usize,
            grid_point: f(2)?,
            seed: u(3)?,
            truth: Outcome::from_u8(u(4)? as u8)?,
            posterior_p1: f(5)?,
            log_bf: f(6)?,
            ig: f(7)?,
            aux: (8..want).map(f).collect::<Result<_>>()?,
        })
    }

    pub fn aux_value(&self, column: &str) -> Option<f64> {
        self.kind.aux_columns().iter().position(|c| *c == column).map(|i| self.aux[i])
    }

    /// Value of a common or kind-specific column.
    pub fn value(&self, column: &str) -> Option<f64> {
        match column {
            "posterior_p1" => Some(self.posterior_p1),
            "log_bf" => Some(self.log_bf),
            "ig" => Some(self.ig),
            "grid_point" => Some(self.grid_point),
            c => self.aux_value(c),
        }
    }
}

fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

/// A replication that raised an error and was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedReplication {
    pub replication: usize,
    pub grid_point: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub grid_point: f64,
    pub n: usize,
    pub failures: usize,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub mean: f64,
    /// Accuracy (identifiability), containment among on-event trials
    /// (stability) or fraction of designs where the predicate holds.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub kind: ExperimentKind,
    pub metric: &'static str,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<FailedReplication>,
    /// Kind-level quantities (reference gap, fitted slope, radius, constants).
    pub extra: KvRecord,
}

impl ExperimentSummary {
    pub const CSV_HEADER: &'static str = "grid_point,n,failures,metric,median,q10,q90,mean,rate";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                fmt17(r.grid_point),
                r.n,
                r.failures,
                self.metric,
                fmt17(r.median),
                fmt17(r.q10),
                fmt17(r.q90),
                fmt17(r.mean),
                r.rate.map_or(String::new(), fmt17)
            );
        }
        s
    }

    pub fn row(&self, grid_point: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.grid_point == grid_point)
    }
}

/// Linear-interpolation quantiles (the `(n - 1) q` rule).
pub fn aggregate_quantiles(values: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::domain("no values to summarize"));
    }
    if values.iter().any(|x| x.is_nan()) {
        return Err(Error::domain("NaN among values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    qs.iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::domain(format!("quantile level {q} outside [0, 1]")));
            }
            let h = (v.len() - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
        })
        .collect()
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Per-design outcome of the separation predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateResult {
    pub holds: bool,
    /// `|I_T| / T`
    pub fraction: f64,
    pub active_steps: usize,
    /// Smallest informed gate weight and drift separation over `I_T`
    /// (NaN when `I_T` is empty), and the scale range.
    pub min_rho_active: f64,
    pub min_separation_active: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Periods where the informed gate weight is at least `rho_lb`, the
/// informed drift separation `|m_{1,1}(v) - m_{1,0}(v)|` is at least
/// `m_lb` and the manipulator is inactive (`v <= tau3`). The predicate holds
/// when that set is a positive fraction of the horizon and every scale is
/// positive and finite.
pub fn identifiability_predicate(theta: &ModelParams, v: &[f64], rho_lb: f64, m_lb: f64) -> Result<PredicateResult> {
    if !(rho_lb > 0.0 && m_lb > 0.0) {
        return Err(Error::domain("rho_lb and m_lb must be positive"));
    }
    if v.is_empty() {
        return Err(Error::domain("empty volume sequence"));
    }
    let mut active = 0;
    let (mut min_rho, mut min_sep) = (f64::INFINITY, f64::INFINITY);
    for &vt in v {
        let rho1 = gate_weights(vt, theta)[0];
        let sep = 2.0 * theta.mu1.abs() * -(-theta.lambda1 * vt).exp_m1();
        if rho1 >= rho_lb && sep >= m_lb && vt <= theta.tau3 {
            active += 1;
            min_rho = min_rho.min(rho1);
            min_sep = min_sep.min(sep);
        }
    }
    let scales = [theta.sigma1, theta.sigma2, theta.sigma3];
    let sigma_min = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_max = scales.iter().copied().fold(0.0, f64::max);
    let fraction = active as f64 / v.len() as f64;
    let nan_if_none = |x: f64| if active == 0 { f64::NAN } else { x };
    Ok(PredicateResult {
        holds: fraction > 0.0 && sigma_min > 0.0 && sigma_max.is_finite(),
        fraction,
        active_steps: active,
        min_rho_active: nan_if_none(min_rho),
        min_separation_active: nan_if_none(min_sep),
        sigma_min,
        sigma_max,
    })
}

/// Records in deterministic (grid point, replication) order plus summary.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub records: Vec<ExperimentRecord>,
    pub summary: ExperimentSummary,
}

fn replication_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    cfg.base_seed.wrapping_add(r as u64)
}

fn draw_outcome<R: Rng + ?Sized>(prior_p1: f64, rng: &mut R) -> Outcome {
    if rng.random::<f64>() < prior_p1 {
        Outcome::One
    } else {
        Outcome::Zero
    }
}

/// `log P(wrong outcome | data)` from the posterior log-odds.
fn log_error(truth: Outcome, z: f64) -> f64 {
    match truth {
        Outcome::One => -softplus(z),
        Outcome::Zero => -softplus(-z),
    }
}

fn simulate(cfg: &ExperimentConfig, theta: &ModelParams, y: Outcome, horizon: usize, seed: u64) -> Result<History> {
    simulate_history(&SimConfig {
        theta: theta.clone(),
        design: cfg.design.clone(),
        ..SimConfig::new(horizon, y, seed)
    })
}

type TaskResult = std::result::Result<Vec<ExperimentRecord>, FailedReplication>;

fn collect(tasks: Vec<TaskResult>) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for t in tasks {
        match t {
            Ok(r) => records.extend(r),
            Err(f) => {
                eprintln!("replication {} (grid {}, seed {}) failed: {}", f.replication, f.grid_point, f.seed, f.message);
                failures.push(f);
            }
        }
    }
    Ok((records, failures))
}

fn fail(replication: usize, grid_point: f64, seed: u64, e: Error) -> FailedReplication {
    FailedReplication { replication, grid_point, seed, message: e.to_string() }
}

/// Runs the configured experiment. Replications are independent tasks with
/// seeds `base_seed + r`; the result does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut extra = KvRecord::new();
    let (records, failures) = match cfg.kind {
        ExperimentKind::Concentration => run_concentration(cfg)?,
        ExperimentKind::Identifiability => run_identifiability(cfg)?,
        ExperimentKind::Stability => run_stability(cfg, &mut extra)?,
        ExperimentKind::Infogain => run_infogain(cfg)?,
        ExperimentKind::Klgap => run_klgap(cfg)?,
        ExperimentKind::Predicate => run_predicate(cfg)?,
    };
    let summary = summarize(cfg, &records, failures, extra)?;
    Ok(ExperimentOutput { config: cfg.clone(), records, summary })
}

fn run_concentration(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let t_max = *cfg.t_grid.iter().max().expect("validated");
    let z0 = logit(cfg.prior_p1)?;
    let tasks: Vec<TaskResult> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(cfg, r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let y = Outcome::One;
                let h = simulate(cfg, &cfg.theta_star, y, t_max, derive_seed(seed, 1))?;
                let inc = to_increments(&h)?;
                let lbf = sequential_log_bf(&inc, h.volumes(), &cfg.prior, &SmcSettings::new(cfg.particles), derive_seed(seed, 2))?;
                cfg.t_grid
                    .iter()
                    .map(|&t| {
                        let log_bf = lbf[t - 1];
                        let z = z0 + log_bf;
                        Ok(ExperimentRecord {
                            kind: cfg.kind,
                            replication: r,
                            grid_point: t as f64,
                            seed,
                            truth: y,
                            posterior_p1: sigmoid(z)?,
                            log_bf,
                            ig: ig_from_log_bf(log_bf, cfg.prior_p1)?,
                            aux: vec![z, log_error(y, z)],
                        })
                    })
                    .collect()
            };
            run().map_err(|e| fail(r, f64::NAN, seed, e))
        })
        .collect();
    let (mut records, failures) = collect(tasks)?;
    records.sort_by(|a, b| a.grid_point.total_cmp(&b.grid_point).then(a.replication.cmp(&b.replication)));
    Ok((records, failures))
}

fn run_identifiability(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let z0 = logit(cfg.prior_p1)?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.omega1_grid.len()).flat_map(|g| (0..cfg.replications).map(move |r| (g, r))).collect();
    let tasks: Vec<TaskResult> = jobs
        .into_par_iter()
        .map(|(g, r)| {
            let w1 = cfg.omega1_grid[g];
            let seed = replication_seed(cfg, r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let theta = cfg.omega_split.apply(&cfg.theta_star, w1);
                let sub = derive_seed(seed, 0x1D00 + g as u64);
                let y = draw_outcome(cfg.prior_p1, &mut rng_from_seed(sub));
                let h = simulate(cfg, &theta, y, cfg.horizon, derive_seed(sub, 1))?;
                let inc = to_increments(&h)?;
                let s = posterior_from_increments(
                    &inc,
                    h.volumes(),
                    &cfg.prior,
                    cfg.prior_p1,
                    &SmcSettings::new(cfg.particles),
                    derive_seed(sub, 2),
                )?;
                let z = z0 + s.log_bf;
                // ties count as incorrect
                let correct = match y {
                    Outcome::One => z > 0.0,
                    Outcome::Zero => z < 0.0,
                };
                Ok(vec![ExperimentRecord {
                    kind: cfg.kind,
                    replication: r,
                    grid_point: w1,
                    seed,
                    truth: y,
                    posterior_p1: s.posterior_p1,
                    log_bf: s.log_bf,
                    ig: ig_from_log_bf(s.log_bf, cfg.prior_p1)?,
                    aux: vec![z, log_error(y, z), correct as u8 as f64],
                }])
            };
            run().map_err(|e| fail(r, w1, seed, e))
        })
        .collect();
    collect(tasks)
}

fn run_infogain(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let t_max = *cfg.t_grid.iter().max().expect("validated");
    let z0 = logit(cfg.prior_p1)?;
    let tasks: Vec<TaskResult> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(cfg, r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let y = draw_outcome(cfg.prior_p1, &mut rng_from_seed(derive_seed(seed, 0)));
                let h = simulate(cfg, &cfg.theta_star, y, t_max, derive_seed(seed, 1))?;
                let inc = to_increments(&h)?;
                let lbf = sequential_log_bf(&inc, h.volumes(), &cfg.prior, &SmcSettings::new(cfg.particles), derive_seed(seed, 2))?;
                cfg.t_grid
                    .iter()
                    .map(|&t| {
                        let z = z0 + lbf[t - 1];
                        Ok(ExperimentRecord {
                            kind: cfg.kind,
                            replication: r,
                            grid_point: t as f64,
                            seed,
                            truth: y,
                            posterior_p1: sigmoid(z)?,
                            log_bf: lbf[t - 1],
                            ig: ig_from_log_bf(lbf[t - 1], cfg.prior_p1)?,
                            aux: vec![z, log_error(y, z)],
                        })
                    })
                    .collect()
            };
            run().map_err(|e| fail(r, f64::NAN, seed, e))
        })
        .collect();
    let (mut records, failures) = collect(tasks)?;
    records.sort_by(|a, b| a.grid_point.total_cmp(&b.grid_point).then(a.replication.cmp(&b.replication)));
    Ok((records, failures))
}

fn run_stability(
    cfg: &ExperimentConfig,
    extra: &mut KvRecord,
) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let y = Outcome::One;
    let settings = SmcSettings::new(cfg.particles);
    let baselines: Vec<Result<(History, f64)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(cfg, r);
            let h = simulate(cfg, &cfg.theta_star, y, cfg.horizon, derive_seed(seed, 1))?;
            let inc = to_increments(&h)?;
            let s = posterior_from_increments(&inc, h.volumes(), &cfg.prior, cfg.prior_p1, &settings, derive_seed(seed, 2))?;
            Ok((h, s.log_bf))
        })
        .collect();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (r, b) in baselines.into_iter().enumerate() {
        match b {
            Ok(x) => ok.push((r, x)),
            Err(e) => failures.push(fail(r, f64::NAN, replication_seed(cfg, r), e)),
        }
    }
    if ok.len() < 2 {
        return Err(Error::domain("fewer than two baseline replications succeeded"));
    }
    let max_abs: Vec<f64> = ok
        .iter()
        .map(|(_, (h, _))| to_increments(h).map(|i| i.dx.iter().fold(0.0f64, |m, x| m.max(x.abs()))))
        .collect::<Result<_>>()?;
    let radius = aggregate_quantiles(&max_abs, &[0.99])?[0];
    let v_max = ok.iter().flat_map(|(_, (h, _))| h.volumes().iter().copied()).fold(0.0, f64::max);
    let grid = ThetaGrid::from_prior(&cfg.prior, cfg.lipschitz_theta_draws, &mut rng_from_seed(derive_seed(cfg.base_seed, 0x7E7A)));
    let lip = lipschitz_constants(&grid, radius, Interval::new(0.0, v_max), &cfg.lipschitz_grid)?;
    extra.extend(&lip.to_kv());
    extra.set_f64("radius_quantile", 0.99);

    let jobs: Vec<(usize, usize)> =
        (0..cfg.sigma_grid.len()).flat_map(|g| (0..ok.len()).map(move |i| (g, i))).collect();
    let tasks: Vec<TaskResult> = jobs
        .into_par_iter()
        .map(|(g, i)| {
            let sigma = cfg.sigma_grid[g];
            let (r, (h, base_bf)) = &ok[i];
            let seed = replication_seed(cfg, *r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let mut rng = rng_from_seed(derive_seed(seed, 0x5100 + g as u64));
                let pert = perturb_increments(h, sigma, &mut rng)?;
                let inc = to_increments(&pert.history)?;
                // same SMC stream as the baseline run
                let s = posterior_from_increments(&inc, pert.history.volumes(), &cfg.prior, cfg.prior_p1, &settings, derive_seed(seed, 2))?;
                let mut rep = stability_bound(h, &pert.history, radius, lip.lx, lip.lv)?;
                let observed = (s.log_bf - base_bf).abs();
                rep.observed_bf_diff = Some(observed);
                let contained = rep.contained().map_or(f64::NAN, |c| c as u8 as f64);
                Ok(vec![ExperimentRecord {
                    kind: cfg.kind,
                    replication: *r,
                    grid_point: sigma,
                    seed,
                    truth: y,
                    posterior_p1: s.posterior_p1,
                    log_bf: s.log_bf,
                    ig: ig_from_log_bf(s.log_bf, cfg.prior_p1)?,
                    aux: vec![
                        *base_bf,
                        observed,
                        rep.bf_bound,
                        rep.posterior_bound,
                        rep.sum_abs_dx_diff,
                        rep.sum_abs_v_diff,
                        rep.on_event as u8 as f64,
                        contained,
                        pert.resamples as f64,
                        lip.lx,
                        lip.lv,
                        radius,
                    ],
                }])
            };
            run().map_err(|e| fail(*r, sigma, seed, e))
        })
        .collect();
    let (records, more) = collect(tasks)?;
    failures.extend(more);
    Ok((records, failures))
}

fn run_klgap(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let settings = if cfg.free_orientation { cfg.gap.clone().without_orientation() } else { cfg.gap.clone() };
    let y = Outcome::One;
    let mut tasks = Vec::new();
    // each gap search is internally parallel over restarts
    for g in 0..cfg.omega1_grid.len() {
        for r in 0..cfg.replications {
            let w1 = cfg.omega1_grid[g];
            let seed = replication_seed(cfg, r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let theta = cfg.omega_split.apply(&cfg.theta_star, w1);
                let mut rng = rng_from_seed(derive_seed(seed, 0x6A00 + g as u64));
                let v = sample_volumes(&cfg.design, cfg.horizon, &mut rng)?;
                let gap = projection_gap((y, &theta), &v, &settings, &mut rng)?;
                Ok(vec![ExperimentRecord {
                    kind: cfg.kind,
                    replication: r,
                    grid_point: w1,
                    seed,
                    truth: y,
                    posterior_p1: f64::NAN,
                    log_bf: f64::NAN,
                    ig: f64::NAN,
                    aux: vec![
                        gap.delta_t,
                        gap.std_error,
                        gap.flipped_value,
                        gap.flipped_std_error,
                        gap.converged as u8 as f64,
                    ],
                }])
            };
            tasks.push(run().map_err(|e| fail(r, w1, seed, e)));
        }
    }
    collect(tasks)
}

fn run_predicate(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<FailedReplication>)> {
    let jobs: Vec<(usize, usize)> =
        (0..cfg.omega1_grid.len()).flat_map(|g| (0..cfg.replications).map(move |r| (g, r))).collect();
    let tasks: Vec<TaskResult> = jobs
        .into_par_iter()
        .map(|(g, r)| {
            let w1 = cfg.omega1_grid[g];
            let seed = replication_seed(cfg, r);
            let run = || -> Result<Vec<ExperimentRecord>> {
                let theta = cfg.omega_split.apply(&cfg.theta_star, w1);
                let v = sample_volumes(&cfg.design, cfg.horizon, &mut rng_from_seed(derive_seed(seed, 0x9D00 + g as u64)))?;
                let p = identifiability_predicate(&theta, &v, cfg.rho_lb, cfg.m_lb)?;
                Ok(vec![ExperimentRecord {
                    kind: cfg.kind,
                    replication: r,
                    grid_point: w1,
                    seed,
                    truth: Outcome::One,
                    posterior_p1: f64::NAN,
                    log_bf: f64::NAN,
                    ig: f64::NAN,
                    aux: vec![p.fraction, p.holds as u8 as f64, p.active_steps as f64],
                }])
            };
            run().map_err(|e| fail(r, w1, seed, e))
        })
        .collect();
    collect(tasks)
}

fn grid_points(cfg: &ExperimentConfig) -> Vec<f64> {
    match cfg.kind {
        ExperimentKind::Concentration | ExperimentKind::Infogain => {
            let mut t: Vec<f64> = cfg.t_grid.iter().map(|&t| t as f64).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        }
        ExperimentKind::Stability => cfg.sigma_grid.clone(),
        _ => cfg.omega1_grid.clone(),
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    records: &[ExperimentRecord],
    failures: Vec<FailedReplication>,
    mut extra: KvRecord,
) -> Result<ExperimentSummary> {
    let metric = cfg.kind.metric();
    let mut rows = Vec::new();
    for g in grid_points(cfg) {
        let at: Vec<&ExperimentRecord> = records.iter().filter(|r| r.grid_point == g).collect();
        let n_fail = failures.iter().filter(|f| f.grid_point == g || f.grid_point.is_nan()).count();
        let values: Vec<f64> = at.iter().filter_map(|r| r.value(metric)).filter(|x| !x.is_nan()).collect();
        if values.is_empty() {
            rows.push(SummaryRow {
                grid_point: g,
                n: 0,
                failures: n_fail,
                median: f64::NAN,
                q10: f64::NAN,
                q90: f64::NAN,
                mean: f64::NAN,
                rate: None,
            });
            continue;
        }
        let q = aggregate_quantiles(&values, &[0.5, 0.1, 0.9])?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let rate = match cfg.kind {
            ExperimentKind::Identifiability => Some(mean),
            ExperimentKind::Stability => {
                let c: Vec<f64> = at.iter().filter_map(|r| r.aux_value("contained")).filter(|x| !x.is_nan()).collect();
                if c.is_empty() {
                    None
                } else {
                    Some(c.iter().sum::<f64>() / c.len() as f64)
                }
            }
            ExperimentKind::Predicate => {
                let h: Vec<f64> = at.iter().filter_map(|r| r.aux_value("holds")).collect();
                Some(h.iter().sum::<f64>() / h.len() as f64)
            }
            _ => None,
        };
        rows.push(SummaryRow { grid_point: g, n: values.len(), failures: n_fail, median: q[0], q10: q[1], q90: q[2], mean, rate });
    }
    if cfg.kind == ExperimentKind::Concentration {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.n > 0).map(|r| (r.grid_point, r.median)).unzip();
        if x.len() >= 2 {
            extra.set_f64("median_slope", ls_slope(&x, &y));
        }
        if let Some(g) = cfg.reference_gap {
            extra.set_f64("reference_gap", g);
        }
    }
    if cfg.kind == ExperimentKind::Stability {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.n > 0).map(|r| (r.grid_point, r.mean)).unzip();
        if x.len() >= 2 {
            extra.set_f64("mean_sigma_correlation", correlation(&x, &y));
        }
    }
    extra.set("failed_replications", failures.len());
    Ok(ExperimentSummary { kind: cfg.kind, metric, rows, failures, extra })
}

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
    pub metadata: PathBuf,
}

/// Writes `<kind>_records.csv`, `<kind>_summary.csv`, `<kind>.svg` and
/// `<kind>_meta.txt` into `dir`. Nothing is written for an empty record set.
pub fn emit_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<OutputFiles> {
    if out.records.is_empty() {
        return Err(Error::domain("no records to write"));
    }
    let kind = out.summary.kind;
    let mut records = ExperimentRecord::header(kind);
    records.push('\n');
    for r in &out.records {
        records.push_str(&r.csv_row());
        records.push('\n');
    }
    let summary = out.summary.csv();
    let svg = render_svg(&out.summary, out.config.reference_gap);
    let mut meta = out.config.to_kv();
    meta.extend(&out.summary.extra);
    for (i, f) in out.summary.failures.iter().enumerate() {
        meta.set(&format!("failure.{i}"), format!("replication={} seed={} grid={} {}", f.replication, f.seed, f.grid_point, f.message));
    }

    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = OutputFiles {
        records: dir.join(format!("{}_records.csv", kind.name())),
        summary: dir.join(format!("{}_summary.csv", kind.name())),
        plot: dir.join(format!("{}.svg", kind.name())),
        metadata: dir.join(format!("{}_meta.txt", kind.name())),
    };
    std::fs::write(&files.records, records)?;
    std::fs::write(&files.summary, summary)?;
    std::fs::write(&files.plot, svg)?;
    meta.write(&files.metadata)?;
    Ok(files)
}

/// Volume path helper for callers that fix the design up front.
pub fn design_volumes(design: &VolumeDesign, horizon: usize, seed: u64) -> Result<Vec<f64>> {
    sample_volumes(design, horizon, &mut rng_from_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_rules() {
        assert_eq!(aggregate_quantiles(&[5.0, 1.0, 3.0, 2.0, 4.0], &[0.5]).unwrap(), vec![3.0]);
        assert_eq!(aggregate_quantiles(&[2.5; 7], &[0.0, 0.1, 0.9, 1.0]).unwrap(), vec![2.5; 4]);
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert!((aggregate_quantiles(&v, &[0.9]).unwrap()[0] - 90.0).abs() < 1e-12);
        assert!(aggregate_quantiles(&[], &[0.5]).is_err());
        assert!(aggregate_quantiles(&[1.0], &[1.5]).is_err());
    }

    #[test]
    fn predicate_examples() {
        let noise = ModelParams::paper_defaults().with_omega([0.0, 1.0, 0.0]);
        let p = identifiability_predicate(&noise, &[1.0, 2.0, 3.0], 0.2, 0.01).unwrap();
        assert!(!p.holds);
        assert_eq!(p.fraction, 0.0);
        let th = ModelParams::paper_defaults();
        let p = identifiability_predicate(&th, &[2.0; 50], 0.2, 0.01).unwrap();
        assert_eq!(p.fraction, 1.0);
        assert!(p.holds);
        let v = design_volumes(&VolumeDesign::default(), 2000, 3).unwrap();
        let p = identifiability_predicate(&th, &v, 0.2, 0.01).unwrap();
        assert!(p.fraction > 0.5, "{}", p.fraction);
    }

    #[test]
    fn record_rows_round_trip() {
        let r = ExperimentRecord {
            kind: ExperimentKind::Identifiability,
            replication: 3,
            grid_point: 0.05,
            seed: 99,
            truth: Outcome::Zero,
            posterior_p1: 0.25,
            log_bf: -1.0986122886681098,
            ig: 0.1308,
            aux: vec![-1.0986122886681098, -0.2876820724517809, 1.0],
        };
        let back = ExperimentRecord::parse_row(r.kind, &r.csv_row()).unwrap();
        assert_eq!(back, r);
        assert!(ExperimentRecord::parse_row(ExperimentKind::Stability, &r.csv_row()).is_err());
    }

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk(kind);
        c.replications = 4;
        c.particles = 32;
        c.horizon = 20;
        c.t_grid = vec![5, 20];
        c.omega1_grid = vec![0.1, 0.5];
        c.sigma_grid = vec![0.01, 0.1];
        c.lipschitz_theta_draws = 4;
        c.lipschitz_grid.x_points = 101;
        c.lipschitz_grid.v_points = 10;
        c.gap.samples = 200;
        c.gap.search_samples = 50;
        c.gap.restarts = 1;
        c.gap.max_evals = 40;
        c.gap.polish_evals = 10;
        c.replications = if kind == ExperimentKind::Klgap { 1 } else { 4 };
        c
    }

    #[test]
    fn every_kind_runs_and_is_deterministic() {
        for kind in ExperimentKind::ALL {
            let cfg = small(kind);
            let a = run_experiment(&cfg).unwrap();
            let b = run_experiment(&cfg).unwrap();
            let rows = |o: &ExperimentOutput| o.records.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
            assert_eq!(rows(&a), rows(&b), "{}", kind.name());
            assert!(!a.records.is_empty());
            for r in &a.records {
                let back = ExperimentRecord::parse_row(kind, &r.csv_row()).unwrap();
                assert_eq!(back.csv_row(), r.csv_row());
                if r.posterior_p1.is_finite() {
                    let z = logit(cfg.prior_p1).unwrap() + r.log_bf;
                    assert!((r.posterior_p1 - sigmoid(z).unwrap()).abs() < 1e-10);
                }
            }
            assert_eq!(a.summary.rows.len(), grid_points(&cfg).len());
        }
    }

    #[test]
    fn outputs_written_and_stable() {
        let cfg = small(ExperimentKind::Concentration);
        let out = run_experiment(&cfg).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = emit_outputs(&out, d1.path()).unwrap();
        let f2 = emit_outputs(&run_experiment(&cfg).unwrap(), d2.path()).unwrap();
        for (a, b) in [(&f1.records, &f2.records), (&f1.summary, &f2.summary), (&f1.plot, &f2.plot)] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let empty = ExperimentOutput { records: vec![], ..out };
        let d3 = tempfile::tempdir().unwrap();
        let target = d3.path().join("sub");
        assert!(emit_outputs(&empty, &target).is_err());
        assert!(!target.exists());
    }
}
