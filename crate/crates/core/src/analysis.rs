//! Information-gain metrics, stability bounds for the posterior odds under
//! history perturbations, and the truncation-based finite-sample bound.
//!
//! The Lipschitz constants and the log-likelihood-ratio envelope are grid
//! suprema. A grid supremum is a lower bound on the true supremum, which is
//! recorded in the metadata written next to every constant.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{posterior_from_increments, sample_prior, PriorSpec, SmcSettings};
use crate::kv::KvRecord;
use crate::logodds::{logit, softplus, to_increments, History};
use crate::model::{Interval, ModelParams, Outcome, PreparedParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulate::{simulate_history, SimConfig, VolumeDesign};

/// `KL(Bern(post) || Bern(prior))` with `0 log 0 = 0`.
pub fn realized_ig(post_p1: f64, prior_p1: f64) -> Result<f64> {
    if !(prior_p1 > 0.0 && prior_p1 < 1.0) {
        return Err(Error::domain(format!("prior must lie in (0, 1), got {prior_p1}")));
    }
    if !(0.0..=1.0).contains(&post_p1) {
        return Err(Error::domain(format!("posterior must lie in [0, 1], got {post_p1}")));
    }
    let term = |p: f64, q: f64| if p == 0.0 { 0.0 } else { p * (p / q).ln() };
    Ok((term(post_p1, prior_p1) + term(1.0 - post_p1, 1.0 - prior_p1)).max(0.0))
}

/// Realized information gain as a function of the log Bayes factor,
/// computed in log space so it stays accurate when the posterior saturates.
pub fn ig_from_log_bf(log_bf: f64, prior_p1: f64) -> Result<f64> {
    let z0 = logit(prior_p1)?;
    let z = z0 + log_bf;
    if !z.is_finite() {
        return Err(Error::domain(format!("non-finite posterior log-odds from log BF {log_bf}")));
    }
    // log pi = -softplus(-z), log(1 - pi) = -softplus(z)
    let (lp, lq) = (-softplus(-z), -softplus(z));
    let (lp0, lq0) = (-softplus(-z0), -softplus(z0));
    let ig = lp.exp() * (lp - lp0) + lq.exp() * (lq - lq0);
    Ok(ig.max(0.0))
}

/// `max(log(1/prior), log(1/(1 - prior)))`, the largest attainable gain.
pub fn ig_cap(prior_p1: f64) -> f64 {
    (-prior_p1.ln()).max(-(-prior_p1).ln_1p())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub failures: usize,
}

impl McEstimate {
    pub fn from_values(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_error: (var / n.max(1) as f64).sqrt(), n, failures: 0 }
    }
}

/// Monte Carlo estimate of the mutual information between the outcome and
/// the increments given the volume path `v`, with `Y ~ Bern(prior_p1)`.
pub fn expected_ig(
    theta_star: &ModelParams,
    v: &[f64],
    prior_p1: f64,
    reps: usize,
    spec: &PriorSpec,
    particles: usize,
    seed: u64,
) -> Result<McEstimate> {
    if reps < 10 {
        return Err(Error::domain(format!("at least 10 replications required, got {reps}")));
    }
    let results: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rs = derive_seed(seed, r as u64);
            let mut rng = rng_from_seed(rs);
            let y = if rng.random::<f64>() < prior_p1 { Outcome::One } else { Outcome::Zero };
            let cfg = SimConfig {
                theta: theta_star.clone(),
                design: VolumeDesign::Explicit(v.to_vec()),
                ..SimConfig::new(v.len(), y, derive_seed(rs, 1))
            };
            let h = simulate_history(&cfg)?;
            let inc = to_increments(&h)?;
            let s = posterior_from_increments(&inc, h.volumes(), spec, prior_p1, &SmcSettings::new(particles), derive_seed(rs, 2))?;
            ig_from_log_bf(s.log_bf, prior_p1)
        })
        .collect();
    let mut values = Vec::with_capacity(reps);
    let mut failures = 0;
    for r in results {
        match r {
            Ok(x) => values.push(x),
            Err(e) if e.is_config() => return Err(e),
            Err(_) => failures += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::domain("every replication failed"));
    }
    let mut est = McEstimate::from_values(&values);
    est.failures = failures;
    Ok(est)
}

/// Parameter points over which suprema are taken.
#[derive(Debug, Clone)]
pub struct ThetaGrid {
    pub points: Vec<ModelParams>,
    pub description: String,
}

impl ThetaGrid {
    pub fn point(theta: &ModelParams) -> Self {
        Self { points: vec![theta.clone()], description: "single point".into() }
    }

    /// `draws` prior samples, plus for every free scalar the two points
    /// with that scalar at an end of its interval and the rest at the
    /// default parameters, plus the all-lower and all-upper corners.
    pub fn from_prior<R: Rng + ?Sized>(spec: &PriorSpec, draws: usize, rng: &mut R) -> Self {
        let mut points: Vec<ModelParams> = (0..draws).map(|_| sample_prior(spec, rng)).collect();
        let base = spec.bounds.clamp(&ModelParams::paper_defaults());
        let free = spec.free_scalars();
        let (mut lo_all, mut hi_all) = (base.clone(), base.clone());
        for &s in &free {
            let Interval { lo, hi } = spec.support(s);
            for x in [lo, hi] {
                if x.is_finite() {
                    let mut p = base.clone();
                    p.set(s, x);
                    points.push(p);
                }
            }
            if lo.is_finite() {
                lo_all.set(s, lo);
            }
            if hi.is_finite() {
                hi_all.set(s, hi);
            }
        }
        points.push(lo_all);
        points.push(hi_all);
        let description = format!("{draws} prior draws + {} axis extremes + 2 corners", points.len() - draws - 2);
        Self { points, description }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid resolution for the suprema.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_points: usize,
    pub v_points: usize,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { x_points: 2001, v_points: 200, step: 1e-5 }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct LipschitzConstants {
    pub lx: f64,
    pub lv: f64,
    pub r: f64,
    pub v_range: Interval,
    pub grid: GridSpec,
    pub theta_grid: String,
    pub theta_points: usize,
}

impl LipschitzConstants {
    pub fn to_kv(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set_f64("lx_R", self.lx);
        r.set_f64("lv_R", self.lv);
        r.set_f64("R", self.r);
        r.set_f64("v_min", self.v_range.lo);
        r.set_f64("v_max", self.v_range.hi);
        r.set("x_points", self.grid.x_points);
        r.set("v_points", self.grid.v_points);
        r.set_f64("fd_step", self.grid.step);
        r.set("theta_grid", &self.theta_grid);
        r.set("theta_points", self.theta_points);
        r.set("method", "grid supremum of central differences (lower bound on the true supremum)");
        r
    }
}

/// Grid suprema of `|d log f_y / dx|` and `|d log f_y / dv|` over
/// `x in [-R, R]`, `v in v_range`, the parameter grid and both outcomes.
pub fn lipschitz_constants(thetas: &ThetaGrid, r: f64, v_range: Interval, grid: &GridSpec) -> Result<LipschitzConstants> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("radius must be positive, got {r}")));
    }
    if !(v_range.lo >= 0.0 && v_range.lo <= v_range.hi && v_range.hi.is_finite()) {
        return Err(Error::domain("volume range must be a finite nonnegative interval"));
    }
    if thetas.is_empty() {
        return Err(Error::domain("empty parameter grid"));
    }
    let xs = linspace(-r, r, grid.x_points);
    let vs = linspace(v_range.lo, v_range.hi, grid.v_points);
    let h = grid.step;
    let (lx, lv) = thetas
        .points
        .par_iter()
        .map(|theta| {
            let prep = PreparedParams::new(theta);
            let (mut lx, mut lv) = (0.0f64, 0.0f64);
            for y in [Outcome::Zero, Outcome::One] {
                for &v in &vs {
                    let (v_lo, v_hi) = if v - h < 0.0 { (v, v + 2.0 * h) } else { (v - h, v + h) };
                    let dv = v_hi - v_lo;
                    for &x in &xs {
                        let gx = (prep.log_density(y, x + h, v) - prep.log_density(y, x - h, v)) / (2.0 * h);
                        let gv = (prep.log_density(y, x, v_hi) - prep.log_density(y, x, v_lo)) / dv;
                        lx = lx.max(gx.abs());
                        lv = lv.max(gv.abs());
                    }
                }
            }
            (lx, lv)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    Ok(LipschitzConstants {
        lx,
        lv,
        r,
        v_range,
        grid: grid.clone(),
        theta_grid: thetas.description.clone(),
        theta_points: thetas.len(),
    })
}

/// `lambda_x sum |dx_t - dx'_t| + lambda_v sum |v_t - v'_t|`.
pub fn history_distance(h: &History, h2: &History, lambda_x: f64, lambda_v: f64) -> Result<f64> {
    let (dx, dv) = path_differences(h, h2)?;
    Ok(lambda_x * dx + lambda_v * dv)
}

fn path_differences(h: &History, h2: &History) -> Result<(f64, f64)> {
    if h.horizon() != h2.horizon() {
        return Err(Error::LengthMismatch { what: "history horizons", left: h.horizon(), right: h2.horizon() });
    }
    let (a, b) = (to_increments(h)?, to_increments(h2)?);
    let dx = a.dx.iter().zip(&b.dx).map(|(x, y)| (x - y).abs()).sum();
    let dv = h.volumes().iter().zip(h2.volumes()).map(|(x, y)| (x - y).abs()).sum();
    Ok((dx, dv))
}

fn max_abs_increment(h: &History) -> Result<f64> {
    Ok(to_increments(h)?.dx.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub lx_r: f64,
    pub lv_r: f64,
    pub r: f64,
    pub sum_abs_dx_diff: f64,
    pub sum_abs_v_diff: f64,
    pub bf_bound: f64,
    /// Bound on the posterior probability difference, `bf_bound / 4`.
    pub posterior_bound: f64,
    /// Filled in by the caller once both Bayes factors are known.
    pub observed_bf_diff: Option<f64>,
    pub on_event: bool,
}

impl StabilityReport {
    pub const CSV_HEADER: &'static str =
        "lx_R,lv_R,R,sum_abs_dx_diff,sum_abs_v_diff,bf_bound,posterior_bound,observed_bf_diff,on_event,contained";

    /// `None` when off the truncation event or not yet observed.
    pub fn contained(&self) -> Option<bool> {
        match (self.on_event, self.observed_bf_diff) {
            (true, Some(d)) => Some(d <= self.bf_bound),
            _ => None,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.17e}"));
        format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{}",
            self.lx_r,
            self.lv_r,
            self.r,
            self.sum_abs_dx_diff,
            self.sum_abs_v_diff,
            self.bf_bound,
            self.posterior_bound,
            opt(self.observed_bf_diff),
            self.on_event,
            self.contained().map_or(String::new(), |c| c.to_string()),
        )
    }
}

/// `2 (L_x sum |dx - dx'| + L_v sum |v - v'|)` and its posterior counterpart.
pub fn stability_bound(h: &History, h_pert: &History, r: f64, lx_r: f64, lv_r: f64) -> Result<StabilityReport> {
    if !(r > 0.0 && lx_r >= 0.0 && lv_r >= 0.0) {
        return Err(Error::domain("radius must be positive and constants nonnegative"));
    }
    let (sum_abs_dx_diff, sum_abs_v_diff) = path_differences(h, h_pert)?;
    let bf_bound = 2.0 * (lx_r * sum_abs_dx_diff + lv_r * sum_abs_v_diff);
    let on_event = max_abs_increment(h)? <= r && max_abs_increment(h_pert)? <= r;
    Ok(StabilityReport {
        lx_r,
        lv_r,
        r,
        sum_abs_dx_diff,
        sum_abs_v_diff,
        bf_bound,
        posterior_bound: bf_bound / 4.0,
        observed_bf_diff: None,
        on_event,
    })
}

/// Grid supremum over parameters in `thetas`, periods and `x in [-R, R]` of
/// `|log f_{y*}(x | v_t, theta*) - log f_{1-y*}(x | v_t, theta)|`.
pub fn lr_envelope(
    thetas: &ThetaGrid,
    theta_star: &ModelParams,
    y_star: Outcome,
    v: &[f64],
    r: f64,
    x_points: usize,
) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("radius must be positive, got {r}")));
    }
    let xs = linspace(-r, r, x_points);
    let truth = PreparedParams::new(theta_star);
    let mut vs = v.to_vec();
    vs.sort_by(f64::total_cmp);
    vs.dedup();
    let log_truth: Vec<Vec<f64>> =
        vs.iter().map(|&vt| xs.iter().map(|&x| truth.log_density(y_star, x, vt)).collect()).collect();
    let alt_y = y_star.flip();
    Ok(thetas
        .points
        .par_iter()
        .map(|theta| {
            let prep = PreparedParams::new(theta);
            let mut b = 0.0f64;
            for (&vt, lt) in vs.iter().zip(&log_truth) {
                for (&x, &l) in xs.iter().zip(lt) {
                    b = b.max((l - prep.log_density(alt_y, x, vt)).abs());
                }
            }
            b
        })
        .reduce(|| 0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteSampleInputs {
    pub delta_t: f64,
    pub epsilon: f64,
    pub r: f64,
    pub b_r: f64,
    pub horizon: usize,
    pub c_q: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteSampleBound {
    /// `exp(-T eps^2 / (2 B_R^2))`
    pub tail_term: f64,
    /// `T C_q R^{-q}`
    pub event_term: f64,
    pub prob_bound: f64,
    /// `exp(-T (delta_T - eps)) + prob_bound`
    pub expected_error_bound: f64,
}

pub fn finite_sample_bound(inp: &FiniteSampleInputs) -> Result<FiniteSampleBound> {
    let FiniteSampleInputs { delta_t, epsilon, r, b_r, horizon, c_q, q } = *inp;
    if !(epsilon > 0.0 && epsilon < delta_t) {
        return Err(Error::domain(format!("need 0 < epsilon < delta_T, got {epsilon} and {delta_t}")));
    }
    if !(q > 2.0) {
        return Err(Error::domain(format!("moment order must exceed 2, got {q}")));
    }
    if !(r > 0.0 && b_r > 0.0 && c_q > 0.0 && horizon > 0) {
        return Err(Error::domain("R, B_R, C_q and T must be positive"));
    }
    let t = horizon as f64;
    let tail_term = (-t * epsilon * epsilon / (2.0 * b_r * b_r)).exp();
    let event_term = t * c_q * r.powf(-q);
    let prob_bound = tail_term + event_term;
    Ok(FiniteSampleBound {
        tail_term,
        event_term,
        prob_bound,
        expected_error_bound: (-t * (delta_t - epsilon)).exp() + prob_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentConstants {
    pub q: f64,
    pub c_q: f64,
    /// Empirical `E|dx|^q` before the safety factor.
    pub empirical_moment: f64,
    pub samples: usize,
}

/// `q = min(nu, 4) - 0.5` and `C_q = 2 * mean |dx|^q` over `samples`
/// increments simulated under `(y, theta)` with volumes cycling through `v`.
pub fn moment_constants<R: Rng + ?Sized>(
    theta: &ModelParams,
    y: Outcome,
    v: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<MomentConstants> {
    if v.is_empty() || samples == 0 {
        return Err(Error::domain("need volumes and a positive sample count"));
    }
    let q = theta.nu.min(4.0) - 0.5;
    let prep = PreparedParams::new(theta);
    let laws: Vec<_> = v.iter().map(|&vt| prep.step_law(y, vt)).collect();
    let total: f64 = (0..samples).map(|i| laws[i % laws.len()].sample(rng).abs().powf(q)).sum();
    let empirical_moment = total / samples as f64;
    Ok(MomentConstants { q, c_q: 2.0 * empirical_moment, empirical_moment, samples })
}

/// Writes `rows` under `header` and a `.meta` sidecar next to it.
pub fn write_csv_with_meta(path: impl AsRef<Path>, header: &str, rows: &[String], meta: &KvRecord) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    meta.write(path.with_extension("meta"))
}

/// The default parameter grid bounds used for suprema.
pub fn default_theta_grid(seed: u64) -> ThetaGrid {
    ThetaGrid::from_prior(&PriorSpec::default(), 512, &mut rng_from_seed(derive_seed(seed, 0x7E7A)))
}
