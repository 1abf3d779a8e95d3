use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::prior::{log_prior_density, sample_prior, PriorSpec};
use super::reparam::Reparam;
use crate::error::{Error, Result};
use crate::kv::fmt_f64;
use crate::logodds::IncrementPath;
use crate::model::{ModelParams, Outcome, PreparedParams};

/// Tuning knobs for [`smc_with_settings`].
#[derive(Debug, Clone, PartialEq)]
pub struct SmcSettings {
    pub particles: usize,
    /// Metropolis moves per particle after each resampling.
    pub rejuvenation_moves: usize,
    /// Resample when ESS drops below this fraction of the particle count.
    pub ess_fraction: f64,
    pub record_trace: bool,
}

impl SmcSettings {
    pub fn new(particles: usize) -> Self {
        Self { particles, rejuvenation_moves: 5, ess_fraction: 0.5, record_trace: false }
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }
}

/// Per-period diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub t: usize,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    /// Metropolis acceptance rate of the rejuvenation sweep (NaN if none).
    pub acceptance: f64,
    pub log_increment: f64,
}

/// Weighted particle approximation of the partial posterior.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub particles: Vec<ModelParams>,
    /// Normalized: `logsumexp(log_weights) = 0`.
    pub log_weights: Vec<f64>,
    pub log_normalizer: f64,
    pub t: usize,
    pub resample_count: usize,
    /// Mean acceptance over all rejuvenation moves (NaN if none ran).
    pub rejuvenation_acceptance: f64,
    pub ess_min: f64,
    pub trace: Vec<StepDiagnostics>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess_of(&self.log_weights)
    }

    /// `sum_i w_i f(theta_i)` with normalized weights.
    pub fn weighted_mean(&self, f: impl Fn(&ModelParams) -> f64) -> f64 {
        self.particles
            .iter()
            .zip(&self.log_weights)
            .map(|(p, lw)| lw.exp() * f(p))
            .sum()
    }

    /// Writes `t,ess,resampled,acceptance,log_increment`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "ess", "resampled", "acceptance", "log_increment"])?;
        for d in &self.trace {
            out.write_record([
                d.t.to_string(),
                fmt_f64(d.ess),
                (d.resampled as u8).to_string(),
                fmt_f64(d.acceptance),
                fmt_f64(d.log_increment),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ess_of(log_weights: &[f64]) -> f64 {
    1.0 / log_weights.iter().map(|lw| (2.0 * lw).exp()).sum::<f64>()
}

/// Systematic resampling: one uniform offset `u0 in [0, 1)`, `n` evenly
/// spaced pointers. Returns ancestor indices.
pub fn systematic_resample(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut i = 0;
    for j in 0..n {
        let pointer = (j as f64 + u0) / n as f64;
        while pointer > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

#[derive(Clone)]
struct Particle {
    theta: ModelParams,
    prep: PreparedParams,
    u: Vec<f64>,
    /// log prior + log Jacobian at `u`.
    log_base: f64,
    loglik: f64,
}

fn check_inputs(inc: &IncrementPath, v: &[f64], spec: &PriorSpec, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 particles, got {n}")));
    }
    if inc.dx.len() != v.len() {
        return Err(Error::LengthMismatch { what: "increments vs volumes", left: inc.dx.len(), right: v.len() });
    }
    spec.validate()
}

/// Log marginal likelihood `log m_y` by sequential importance sampling with
/// ESS-triggered systematic resampling and random-walk Metropolis
/// rejuvenation (5 moves, default settings).
pub fn smc_log_marginal<R: Rng + ?Sized>(
    inc: &IncrementPath,
    v: &[f64],
    y: Outcome,
    spec: &PriorSpec,
    n: usize,
    rng: &mut R,
) -> Result<(f64, ParticleEnsemble)> {
    smc_with_settings(inc, v, y, spec, &SmcSettings::new(n), rng)
}

pub fn smc_with_settings<R: Rng + ?Sized>(
    inc: &IncrementPath,
    v: &[f64],
    y: Outcome,
    spec: &PriorSpec,
    settings: &SmcSettings,
    rng: &mut R,
) -> Result<(f64, ParticleEnsemble)> {
    let n = settings.particles;
    check_inputs(inc, v, spec, n)?;
    let rp = Reparam::new(spec);

    let mut particles: Vec<Particle> = (0..n)
        .map(|_| {
            let drawn = sample_prior(spec, rng);
            let u = rp.to_unconstrained(&drawn);
            let (theta, log_jac) = rp.to_constrained(&u);
            let log_base = log_prior_density(spec, &theta) + log_jac;
            Particle { prep: PreparedParams::new(&theta), theta, u, log_base, loglik: 0.0 }
        })
        .collect();

    let mut log_w = vec![-(n as f64).ln(); n];
    let mut log_z = 0.0;
    let mut resample_count = 0;
    let mut moves_tried = 0usize;
    let mut moves_accepted = 0usize;
    let mut ess_min = n as f64;
    let mut trace = Vec::new();

    for t in 0..inc.dx.len() {
        let (dx, vt) = (inc.dx[t], v[t]);
        for (p, lw) in particles.iter_mut().zip(log_w.iter_mut()) {
            let l = p.prep.log_density(y, dx, vt);
            if l.is_nan() || l == f64::INFINITY {
                return Err(Error::NonFiniteLikelihood { step: t + 1 });
            }
            p.loglik += l;
            *lw += l;
        }
        let lse = log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(Error::NonFiniteLikelihood { step: t + 1 });
        }
        log_z += lse;
        for lw in log_w.iter_mut() {
            *lw -= lse;
        }
        let ess = ess_of(&log_w);
        ess_min = ess_min.min(ess);

        let mut diag = StepDiagnostics { t: t + 1, ess, resampled: false, acceptance: f64::NAN, log_increment: lse };
        if ess < settings.ess_fraction * n as f64 {
            resample_count += 1;
            diag.resampled = true;
            let chol = proposal_factor(&particles, &log_w, rp.dim());
            let weights: Vec<f64> = log_w.iter().map(|lw| lw.exp()).collect();
            let ancestors = systematic_resample(&weights, n, rng.random::<f64>());
            particles = ancestors.iter().map(|&a| particles[a].clone()).collect();
            log_w.iter_mut().for_each(|lw| *lw = -(n as f64).ln());

            if let Some(l) = chol {
                let (tried, accepted) = rejuvenate(
                    &mut particles,
                    &l,
                    &rp,
                    spec,
                    y,
                    &inc.dx[..=t],
                    &v[..=t],
                    settings.rejuvenation_moves,
                    rng,
                );
                moves_tried += tried;
                moves_accepted += accepted;
                diag.acceptance = accepted as f64 / tried.max(1) as f64;
            }
        }
        if settings.record_trace {
            trace.push(diag);
        }
    }

    let ensemble = ParticleEnsemble {
        particles: particles.into_iter().map(|p| p.theta).collect(),
        log_weights: log_w,
        log_normalizer: log_z,
        t: inc.dx.len(),
        resample_count,
        rejuvenation_acceptance: if moves_tried == 0 { f64::NAN } else { moves_accepted as f64 / moves_tried as f64 },
        ess_min,
        trace,
    };
    Ok((log_z, ensemble))
}

/// Cholesky factor of `(2.38^2 / d) * Cov_w(u) + 1e-6 I`; `None` when there
/// is nothing to move.
fn proposal_factor(particles: &[Particle], log_w: &[f64], d: usize) -> Option<DMatrix<f64>> {
    if d == 0 {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|lw| lw.exp()).collect();
    let mut mean = DVector::<f64>::zeros(d);
    for (p, wi) in particles.iter().zip(&w) {
        for j in 0..d {
            mean[j] += wi * p.u[j];
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (p, wi) in particles.iter().zip(&w) {
        for a in 0..d {
            let da = p.u[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += wi * da * (p.u[b] - mean[b]);
            }
        }
    }
    let scale = 2.38 * 2.38 / d as f64;
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let mut jitter = 1e-6;
    loop {
        let mut m = &cov * scale;
        for a in 0..d {
            m[(a, a)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Some(ch.l());
        }
        jitter *= 10.0;
        if jitter > 1.0 {
            return Some(DMatrix::identity(d, d) * 0.1);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn rejuvenate<R: Rng + ?Sized>(
    particles: &mut [Particle],
    chol: &DMatrix<f64>,
    rp: &Reparam,
    spec: &PriorSpec,
    y: Outcome,
    dx: &[f64],
    v: &[f64],
    moves: usize,
    rng: &mut R,
) -> (usize, usize) {
    let d = rp.dim();
    let mut z = vec![0.0; d];
    let mut u_new = vec![0.0; d];
    let mut accepted = 0;
    let mut tried = 0;
    for p in particles.iter_mut() {
        for _ in 0..moves {
            tried += 1;
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for a in 0..d {
                let mut step = 0.0;
                for b in 0..=a {
                    step += chol[(a, b)] * z[b];
                }
                u_new[a] = p.u[a] + step;
            }
            let (theta, log_jac) = rp.to_constrained(&u_new);
            let log_base = log_prior_density(spec, &theta) + log_jac;
            let log_u: f64 = rng.random::<f64>().ln();
            if !log_base.is_finite() {
                continue;
            }
            let prep = PreparedParams::new(&theta);
            let mut loglik = 0.0;
            for (&d_t, &v_t) in dx.iter().zip(v) {
                loglik += prep.log_density(y, d_t, v_t);
            }
            if loglik.is_nan() {
                continue;
            }
            let log_alpha = log_base + loglik - p.log_base - p.loglik;
            if log_u < log_alpha {
                p.theta = theta;
                p.prep = prep;
                p.u.copy_from_slice(&u_new);
                p.log_base = log_base;
                p.loglik = loglik;
                accepted += 1;
            }
        }
    }
    (tried, accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logodds::to_increments;
    use crate::model::path_log_likelihood;
    use crate::rng::rng_from_seed;
    use crate::simulate::{simulate_history, SimConfig};

    fn history(t: usize, seed: u64) -> (IncrementPath, Vec<f64>) {
        let h = simulate_history(&SimConfig::new(t, Outcome::One, seed)).unwrap();
        (to_increments(&h).unwrap(), h.volumes().to_vec())
    }

    #[test]
    fn point_mass_is_exact() {
        let theta = ModelParams::paper_defaults();
        let (inc, v) = history(100, 3);
        let spec = PriorSpec::point_mass_at(&theta);
        for y in Outcome::BOTH {
            let (lm, ens) = smc_log_marginal(&inc, &v, y, &spec, 64, &mut rng_from_seed(1)).unwrap();
            let exact = path_log_likelihood(y, &inc, &v, &theta).unwrap();
            assert!((lm - exact).abs() < 1e-9, "{lm} vs {exact}");
            assert_eq!(ens.resample_count, 0);
        }
    }

    #[test]
    fn empty_path_has_zero_log_marginal() {
        let inc = IncrementPath { x0: 0.0, dx: vec![] };
        let (lm, ens) = smc_log_marginal(&inc, &[], Outcome::One, &PriorSpec::default(), 16, &mut rng_from_seed(0)).unwrap();
        assert_eq!(lm, 0.0);
        assert_eq!(ens.t, 0);
    }

    #[test]
    fn input_errors() {
        let inc = IncrementPath { x0: 0.0, dx: vec![0.1] };
        let spec = PriorSpec::default();
        assert!(smc_log_marginal(&inc, &[1.0], Outcome::One, &spec, 1, &mut rng_from_seed(0)).is_err());
        assert!(matches!(
            smc_log_marginal(&inc, &[1.0, 2.0], Outcome::One, &spec, 8, &mut rng_from_seed(0)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weights_stay_normalized_and_deterministic() {
        let (inc, v) = history(60, 4);
        let spec = PriorSpec::default();
        let settings = SmcSettings::new(200).with_trace();
        let (a, ens) = smc_with_settings(&inc, &v, Outcome::One, &spec, &settings, &mut rng_from_seed(9)).unwrap();
        assert!(log_sum_exp(&ens.log_weights).abs() < 1e-10);
        assert_eq!(ens.trace.len(), 60);
        assert!(ens.resample_count > 0);
        assert!(ens.rejuvenation_acceptance > 0.0 && ens.rejuvenation_acceptance < 1.0);
        let (b, _) = smc_with_settings(&inc, &v, Outcome::One, &spec, &settings, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        ens.write_trace_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 61);
    }

    #[test]
    fn systematic_resampling_is_unbiased() {
        // Weighted mean of f(i) = i^2 over 10^3 repetitions.
        let w = [0.05, 0.3, 0.1, 0.02, 0.4, 0.13];
        let target: f64 = w.iter().enumerate().map(|(i, wi)| wi * (i * i) as f64).sum();
        let n = 7;
        let mut rng = rng_from_seed(3);
        let reps = 1000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let idx = systematic_resample(&w, n, rng.random());
                idx.iter().map(|&i| (i * i) as f64).sum::<f64>() / n as f64
            })
            .collect();
        let m = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((m - target).abs() < 2.0 * sd / (reps as f64).sqrt() + 1e-12, "{m} vs {target}");
    }

    #[test]
    fn systematic_resampling_counts() {
        let idx = systematic_resample(&[0.5, 0.25, 0.25], 4, 0.5);
        assert_eq!(idx, vec![0, 0, 1, 2]);
    }

    #[test]
    fn rejuvenation_preserves_partial_posterior() {
        // Weighted mean log-likelihood before and after a rejuvenation sweep
        // agree within Monte Carlo error across repeated trials.
        let (inc, v) = history(30, 12);
        let spec = PriorSpec::default();
        let rp = Reparam::new(&spec);
        let mut diffs = Vec::new();
        for rep in 0..30 {
            let mut rng = rng_from_seed(100 + rep);
            let (_, ens) = smc_log_marginal(&inc, &v, Outcome::One, &spec, 300, &mut rng).unwrap();
            // equal-weight ensemble from systematic resampling
            let weights: Vec<f64> = ens.log_weights.iter().map(|l| l.exp()).collect();
            let idx = systematic_resample(&weights, ens.len(), rng.random());
            let mut particles: Vec<Particle> = idx
                .iter()
                .map(|&i| {
                    let th = ens.particles[i].clone();
                    let u = rp.to_unconstrained(&th);
                    let (theta, lj) = rp.to_constrained(&u);
                    let loglik = path_log_likelihood(Outcome::One, &inc, &v, &theta).unwrap();
                    Particle {
                        prep: PreparedParams::new(&theta),
                        log_base: log_prior_density(&spec, &theta) + lj,
                        theta,
                        u,
                        loglik,
                    }
                })
                .collect();
            let before = particles.iter().map(|p| p.loglik).sum::<f64>() / particles.len() as f64;
            let lw = vec![-(particles.len() as f64).ln(); particles.len()];
            let chol = proposal_factor(&particles, &lw, rp.dim()).unwrap();
            rejuvenate(&mut particles, &chol, &rp, &spec, Outcome::One, &inc.dx, &v, 5, &mut rng);
            let after = particles.iter().map(|p| p.loglik).sum::<f64>() / particles.len() as f64;
            diffs.push(after - before);
        }
        let n = diffs.len() as f64;
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(m.abs() < 3.0 * sd / n.sqrt(), "mean shift {m}, sd {sd}");
    }

    #[test]
    fn long_path_stays_finite() {
        let (inc, v) = history(500, 5);
        let (lm, ens) = smc_log_marginal(&inc, &v, Outcome::One, &PriorSpec::default(), 100, &mut rng_from_seed(2)).unwrap();
        assert!(lm.is_finite());
        assert!(ens.log_weights.iter().all(|l| l.is_finite()));
    }
}
