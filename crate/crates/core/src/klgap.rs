//! KL divergences between outcome-conditional increment laws and the
//! projection gap: the smallest per-period divergence from the true law to
//! any law that conditions on the wrong outcome.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{sample_prior, PriorSpec, Reparam, ScalarPrior};
use crate::kv::KvRecord;
use crate::model::{Interval, ModelParams, Outcome, PreparedParams, Scalar};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::rng::{derive_seed, rng_from_seed};

/// `KL(N(m1, s1^2) || N(m2, s2^2))`.
pub fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::domain(format!("scales must be positive, got {s1} and {s2}")));
    }
    Ok((s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5)
}

/// Monte Carlo KL estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl KlEstimate {
    fn from_ratios(r: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in r {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        Self { value: mean, std_error: (var / n as f64).sqrt(), samples: n }
    }
}

/// One side of a divergence: an outcome and the parameters it is paired with.
pub type Law<'a> = (Outcome, &'a ModelParams);

/// `KL(f_{y*}(.|v, theta*) || f_y(.|v, theta))` from `m` truth draws.
pub fn kl_per_step<R: Rng + ?Sized>(truth: Law<'_>, alt: Law<'_>, v: f64, m: usize, rng: &mut R) -> Result<KlEstimate> {
    if m < 100 {
        return Err(Error::domain(format!("at least 100 samples required, got {m}")));
    }
    let samples = TruthSamples::draw(truth, &[v], m, rng)?;
    Ok(samples.per_step(alt)[0])
}

/// Truth draws fixed once per period and reused for every candidate.
#[derive(Debug, Clone)]
pub struct TruthSamples {
    volumes: Vec<f64>,
    dx: Vec<Vec<f64>>,
    log_truth: Vec<Vec<f64>>,
}

impl TruthSamples {
    pub fn draw<R: Rng + ?Sized>(truth: Law<'_>, v: &[f64], m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::domain("sample count must be positive"));
        }
        let (y, theta) = truth;
        let prep = PreparedParams::new(theta);
        let mut dx = Vec::with_capacity(v.len());
        let mut log_truth = Vec::with_capacity(v.len());
        for &vt in v {
            if !(vt >= 0.0 && vt.is_finite()) {
                return Err(Error::domain(format!("volume must be finite and nonnegative, got {vt}")));
            }
            let law = prep.step_law(y, vt);
            let xs: Vec<f64> = (0..m).map(|_| law.sample(rng)).collect();
            log_truth.push(xs.iter().map(|&x| law.log_density(x)).collect());
            dx.push(xs);
        }
        Ok(Self { volumes: v.to_vec(), dx, log_truth })
    }

    pub fn horizon(&self) -> usize {
        self.volumes.len()
    }

    pub fn samples_per_step(&self) -> usize {
        self.dx.first().map_or(0, Vec::len)
    }

    /// The first `m` draws of every period.
    pub fn head(&self, m: usize) -> Self {
        Self {
            volumes: self.volumes.clone(),
            dx: self.dx.iter().map(|d| d[..m.min(d.len())].to_vec()).collect(),
            log_truth: self.log_truth.iter().map(|d| d[..m.min(d.len())].to_vec()).collect(),
        }
    }

    pub fn per_step(&self, alt: Law<'_>) -> Vec<KlEstimate> {
        let (y, theta) = alt;
        let prep = PreparedParams::new(theta);
        self.volumes
            .iter()
            .zip(self.dx.iter().zip(&self.log_truth))
            .map(|(&v, (xs, lt))| {
                KlEstimate::from_ratios(xs.iter().zip(lt).map(|(&x, &l)| l - prep.log_density(y, x, v)))
            })
            .collect()
    }

    /// Sum of the per-period estimates: the path divergence.
    pub fn path_kl(&self, alt: Law<'_>) -> f64 {
        self.per_step(alt).iter().map(|k| k.value).sum()
    }

    /// Per-period average divergence; the search objective.
    pub fn mean_kl(&self, alt: Law<'_>) -> f64 {
        let (y, theta) = alt;
        let prep = PreparedParams::new(theta);
        let mut total = 0.0;
        for ((&v, xs), lt) in self.volumes.iter().zip(&self.dx).zip(&self.log_truth) {
            let s: f64 = xs.iter().zip(lt).map(|(&x, &l)| l - prep.log_density(y, x, v)).sum();
            total += s / xs.len() as f64;
        }
        total / self.volumes.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSettings {
    /// Candidate set: the support of this prior. Starts are drawn from it.
    pub search: PriorSpec,
    pub restarts: usize,
    pub max_evals: usize,
    /// Draws per period for the final evaluation.
    pub samples: usize,
    /// Draws per period used during the search (a prefix of the full set).
    pub search_samples: usize,
    /// Evaluations spent refining the best restart on the full sample set.
    pub polish_evals: usize,
    /// Also start from the truth's parameters.
    pub start_at_truth: bool,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            search: PriorSpec::default().with_uniform_nu(),
            restarts: 20,
            max_evals: 2000,
            samples: 10_000,
            search_samples: 400,
            polish_evals: 300,
            start_at_truth: true,
        }
    }
}

impl GapSettings {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if self.samples < 100 {
            return Err(Error::config("samples must be at least 100"));
        }
        if self.search_samples == 0 || self.search_samples > self.samples {
            return Err(Error::config("search_samples must lie in 1..=samples"));
        }
        if self.restarts == 0 && !self.start_at_truth {
            return Err(Error::config("no starting points"));
        }
        Ok(())
    }

    /// Drops the sign constraint on the drift magnitudes so that the
    /// mirror-image parameterization is reachable.
    pub fn without_orientation(mut self) -> Self {
        let bounds = self
            .search
            .bounds
            .clone()
            .with(Scalar::Mu1, Interval::new(-3.0, 3.0))
            .with(Scalar::Mu3, Interval::new(-3.0, 3.0));
        self.search = self
            .search
            .with_bounds(bounds)
            .with(Scalar::Mu1, ScalarPrior::Normal { mean: 0.0, sd: 1.0 })
            .with(Scalar::Mu3, ScalarPrior::Normal { mean: 0.0, sd: 1.0 });
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartRecord {
    pub start_objective: f64,
    pub best_objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub from_truth: bool,
}

#[derive(Debug, Clone)]
pub struct GapResult {
    pub delta_t: f64,
    /// Standard error of `delta_t` at the fixed minimizer.
    pub std_error: f64,
    pub argmin_theta: ModelParams,
    pub alt_outcome: Outcome,
    pub per_step: Vec<KlEstimate>,
    /// Mean divergence at the truth's parameters under the wrong outcome.
    pub flipped_value: f64,
    pub flipped_std_error: f64,
    pub restarts: Vec<RestartRecord>,
    /// Running best search objective across restarts.
    pub best_trace: Vec<f64>,
    pub converged: bool,
}

impl GapResult {
    pub fn to_kv(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set_f64("delta_t", self.delta_t);
        r.set_f64("std_error", self.std_error);
        r.set("alt_outcome", self.alt_outcome.as_u8());
        r.set("horizon", self.per_step.len());
        r.set("samples", self.per_step.first().map_or(0, |k| k.samples));
        r.set_f64("flipped_value", self.flipped_value);
        r.set_f64("flipped_std_error", self.flipped_std_error);
        r.set("restarts", self.restarts.len());
        r.set("restarts_converged", self.restarts.iter().filter(|r| r.converged).count());
        r.set("converged", self.converged);
        let trace: Vec<String> = self.best_trace.iter().map(|x| format!("{x:.6e}")).collect();
        r.set("best_trace", trace.join(","));
        let theta = self.argmin_theta.to_kv();
        for k in theta.keys() {
            r.set(&format!("argmin.{k}"), theta.get(k).unwrap_or_default());
        }
        r
    }

    pub fn write_per_step_csv(&self, path: impl AsRef<Path>, volumes: &[f64]) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,v,kl,std_error,samples")?;
        for (t, (k, v)) in self.per_step.iter().zip(volumes).enumerate() {
            writeln!(w, "{},{},{},{},{}", t + 1, v, k.value, k.std_error, k.samples)?;
        }
        Ok(())
    }
}

fn aggregate_se(per_step: &[KlEstimate]) -> f64 {
    let t = per_step.len().max(1) as f64;
    per_step.iter().map(|k| k.std_error * k.std_error).sum::<f64>().sqrt() / t
}

/// Approximates `inf_theta (1/T) sum_t KL(f_{y*}(.|v_t, theta*) || f_{1-y*}(.|v_t, theta))`
/// over the support of `settings.search`.
pub fn projection_gap<R: Rng + ?Sized>(
    truth: Law<'_>,
    v: &[f64],
    settings: &GapSettings,
    rng: &mut R,
) -> Result<GapResult> {
    settings.validate()?;
    if v.is_empty() {
        return Err(Error::domain("empty volume sequence"));
    }
    let (y_star, theta_star) = truth;
    let alt_y = y_star.flip();
    let full = TruthSamples::draw(truth, v, settings.samples, rng)?;
    let coarse = full.head(settings.search_samples);
    let reparam = Reparam::new(&settings.search);

    let mut starts: Vec<(Vec<f64>, bool)> = Vec::new();
    if settings.start_at_truth {
        let clamped = settings.search.bounds.clamp(theta_star);
        starts.push((reparam.to_unconstrained(&clamped), true));
    }
    for _ in 0..settings.restarts {
        starts.push((reparam.to_unconstrained(&sample_prior(&settings.search, rng)), false));
    }

    let objective = |s: &TruthSamples, u: &[f64]| {
        let (theta, _) = reparam.to_constrained(u);
        s.mean_kl((alt_y, &theta))
    };
    let opts = SimplexOptions { max_evals: settings.max_evals, ..SimplexOptions::default() };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|(u0, from_truth)| {
            let f = |u: &[f64]| objective(&coarse, u);
            let start_objective = f(u0);
            nelder_mead(&f, u0, &opts).map(|out| {
                let rec = RestartRecord {
                    start_objective,
                    best_objective: out.value,
                    evaluations: out.evaluations,
                    converged: out.converged,
                    from_truth: *from_truth,
                };
                (out.x, rec)
            })
        })
        .collect::<Result<_>>()?;

    let mut best_trace = Vec::with_capacity(runs.len());
    let mut best = f64::INFINITY;
    for (_, rec) in &runs {
        best = best.min(rec.best_objective);
        best_trace.push(best);
    }
    let (best_idx, _) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.best_objective.total_cmp(&b.1 .1.best_objective))
        .expect("at least one start");
    let mut u_best = runs[best_idx].0.clone();
    let mut converged = runs[best_idx].1.converged;
    if settings.polish_evals > 0 {
        let f = |u: &[f64]| objective(&full, u);
        let polish = nelder_mead(
            &f,
            &u_best,
            &SimplexOptions { max_evals: settings.polish_evals, initial_step: 0.05, ..SimplexOptions::default() },
        )?;
        if polish.value <= f(&u_best) {
            u_best = polish.x;
            converged = converged || polish.converged;
        }
    }
    let (argmin_theta, _) = reparam.to_constrained(&u_best);
    let per_step = full.per_step((alt_y, &argmin_theta));
    let delta_t = per_step.iter().map(|k| k.value).sum::<f64>() / per_step.len() as f64;
    let flipped = full.per_step((alt_y, theta_star));
    let flipped_value = flipped.iter().map(|k| k.value).sum::<f64>() / flipped.len() as f64;
    Ok(GapResult {
        delta_t,
        std_error: aggregate_se(&per_step),
        argmin_theta,
        alt_outcome: alt_y,
        flipped_std_error: aggregate_se(&flipped),
        flipped_value,
        per_step,
        restarts: runs.into_iter().map(|(_, r)| r).collect(),
        best_trace,
        converged,
    })
}

/// Seeded convenience wrapper around [`projection_gap`].
pub fn projection_gap_seeded(truth: Law<'_>, v: &[f64], settings: &GapSettings, seed: u64) -> Result<GapResult> {
    projection_gap(truth, v, settings, &mut rng_from_seed(derive_seed(seed, 0x6A9)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_kl_values() {
        assert_eq!(gaussian_kl(0.2, 0.7, 0.2, 0.7).unwrap(), 0.0);
        assert!((gaussian_kl(0.5, 0.3, -0.5, 0.3).unwrap() - 5.555_555_555_6).abs() < 1e-9);
        assert!((gaussian_kl(0.0, 1.0, 0.0, 2.0).unwrap() - 0.318_147_180_56).abs() < 1e-10);
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_kl(0.0, 1.0, 0.0, -1.0).is_err());
    }

    fn single_informed() -> ModelParams {
        ModelParams::paper_defaults().with_omega([1.0, 0.0, 0.0])
    }

    #[test]
    fn informed_only_matches_closed_form() {
        let th = single_informed();
        let m = 0.5 * (1.0 - (-0.2f64).exp());
        let s = 0.3 / 1.1f64.sqrt();
        assert!((m - 0.090_635).abs() < 1e-6 && (s - 0.286_039).abs() < 1e-6);
        let exact = gaussian_kl(m, s, -m, s).unwrap();
        assert!((exact - 0.200_81).abs() < 1e-5);
        let k = kl_per_step((Outcome::One, &th), (Outcome::Zero, &th), 2.0, 100_000, &mut rng_from_seed(3)).unwrap();
        assert!((k.value - exact).abs() < 3.0 * k.std_error, "{k:?} vs {exact}");
    }

    #[test]
    fn identical_laws_have_zero_divergence() {
        let th = ModelParams::paper_defaults();
        let k = kl_per_step((Outcome::One, &th), (Outcome::One, &th), 7.0, 1000, &mut rng_from_seed(1)).unwrap();
        assert!(k.value.abs() < 1e-12);
        assert!(kl_per_step((Outcome::One, &th), (Outcome::One, &th), 1.0, 50, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn pure_noise_is_outcome_free() {
        let th = ModelParams::paper_defaults().with_omega([0.0, 1.0, 0.0]);
        for y in [Outcome::Zero, Outcome::One] {
            let k = kl_per_step((Outcome::One, &th), (y, &th), 3.0, 10_000, &mut rng_from_seed(5)).unwrap();
            assert!(k.value.abs() <= 3.0 * k.std_error + 1e-15, "{k:?}");
        }
    }

    #[test]
    fn path_divergence_is_sum_of_steps() {
        let th = ModelParams::paper_defaults();
        let v = [0.5, 2.0, 6.0, 9.0];
        let s = TruthSamples::draw((Outcome::One, &th), &v, 500, &mut rng_from_seed(8)).unwrap();
        let alt = (Outcome::Zero, &th);
        let sum: f64 = (0..v.len())
            .map(|t| {
                let one = TruthSamples {
                    volumes: vec![v[t]],
                    dx: vec![s.dx[t].clone()],
                    log_truth: vec![s.log_truth[t].clone()],
                };
                one.path_kl(alt)
            })
            .sum();
        assert!((s.path_kl(alt) - sum).abs() < 1e-12);
        assert!((s.mean_kl(alt) * v.len() as f64 - sum).abs() < 1e-12);
    }

    #[test]
    fn point_search_reproduces_oracle() {
        let th = single_informed();
        let settings = GapSettings {
            search: PriorSpec::point_mass_at(&th),
            restarts: 0,
            samples: 100_000,
            search_samples: 100,
            ..GapSettings::default()
        };
        let g = projection_gap((Outcome::One, &th), &[2.0], &settings, &mut rng_from_seed(2)).unwrap();
        assert!((g.delta_t - 0.200_81).abs() < 3.0 * g.std_error + 1e-5, "{} +- {}", g.delta_t, g.std_error);
        assert_eq!(g.delta_t, g.flipped_value);
    }

    #[test]
    fn search_does_not_exceed_flipped_value() {
        let th = ModelParams::paper_defaults();
        let v: Vec<f64> = (0..10).map(|t| 0.5 + t as f64).collect();
        let settings = GapSettings {
            restarts: 2,
            max_evals: 300,
            samples: 400,
            search_samples: 200,
            polish_evals: 50,
            ..GapSettings::default()
        };
        let g = projection_gap((Outcome::One, &th), &v, &settings, &mut rng_from_seed(4)).unwrap();
        assert!(g.delta_t <= g.flipped_value + 3.0 * g.flipped_std_error);
        assert_eq!(g.restarts.len(), 3);
        assert!(g.best_trace.windows(2).all(|w| w[1] <= w[0]));
        let mean: f64 = g.per_step.iter().map(|k| k.value).sum::<f64>() / v.len() as f64;
        assert!((mean - g.delta_t).abs() < 1e-12);
    }

    #[test]
    fn free_orientation_search_admits_negative_drifts() {
        let th = ModelParams::paper_defaults();
        let v: Vec<f64> = (0..10).map(|t| 0.5 + t as f64).collect();
        let settings = GapSettings {
            restarts: 6,
            max_evals: 300,
            samples: 400,
            search_samples: 200,
            polish_evals: 50,
            ..GapSettings::default()
        }
        .without_orientation();
        let g = projection_gap((Outcome::One, &th), &v, &settings, &mut rng_from_seed(8)).unwrap();
        assert!(g.delta_t <= g.flipped_value + 3.0 * g.flipped_std_error);
        assert!(settings.search.support(Scalar::Mu1).lo < 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn divergence_nonnegative_up_to_noise(
            v in 0.0f64..12.0,
            w1 in 0.05f64..0.9,
            mu in 0.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut th = ModelParams::paper_defaults().with_omega([w1, (1.0 - w1) / 2.0, (1.0 - w1) / 2.0]);
            th.mu1 = mu;
            let alt = ModelParams::paper_defaults();
            let k = kl_per_step((Outcome::One, &th), (Outcome::Zero, &alt), v, 2000, &mut rng_from_seed(seed)).unwrap();
            prop_assert!(k.std_error >= 0.0);
            prop_assert!(k.value >= -3.0 * k.std_error, "{:?}", k);
        }

        #[test]
        fn gaussian_kl_nonnegative(m1 in -3.0f64..3.0, s1 in 0.01f64..3.0, m2 in -3.0f64..3.0, s2 in 0.01f64..3.0) {
            prop_assert!(gaussian_kl(m1, s1, m2, s2).unwrap() >= -1e-12);
        }
    }
}
