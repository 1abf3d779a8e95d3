use super::prior::PriorSpec;
use super::smc::{smc_with_settings, SmcSettings};
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::logodds::{logit, sigmoid, to_increments, History, IncrementPath};
use crate::model::Outcome;
use crate::rng::{derive_seed, rng_from_seed};

/// Outcome posterior assembled from the two per-outcome marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub log_bf: f64,
    /// `logit(prior_p1) + log_bf`, kept exactly; `posterior_p1` is its
    /// logistic image and saturates at 0 or 1 for extreme evidence.
    pub posterior_log_odds: f64,
    pub posterior_p1: f64,
    pub prior_p1: f64,
    pub log_m1: f64,
    pub log_m0: f64,
    pub ess_min: f64,
    pub seed: u64,
    pub seed_y1: u64,
    pub seed_y0: u64,
    pub particles: usize,
}

impl PosteriorSummary {
    /// Combines two log marginals under prior probability `prior_p1`.
    pub fn from_marginals(log_m1: f64, log_m0: f64, prior_p1: f64) -> Result<Self> {
        let log_bf = log_m1 - log_m0;
        let posterior_log_odds = logit(prior_p1)? + log_bf;
        Ok(Self {
            log_bf,
            posterior_log_odds,
            posterior_p1: sigmoid(posterior_log_odds)?,
            prior_p1,
            log_m1,
            log_m0,
            ess_min: f64::NAN,
            seed: 0,
            seed_y1: 0,
            seed_y0: 0,
            particles: 0,
        })
    }

    pub fn to_kv(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set_f64("log_bf", self.log_bf);
        r.set_f64("posterior_log_odds", self.posterior_log_odds);
        r.set_f64("posterior_p1", self.posterior_p1);
        r.set_f64("prior_p1", self.prior_p1);
        r.set_f64("log_m1", self.log_m1);
        r.set_f64("log_m0", self.log_m0);
        r.set_f64("ess_min", self.ess_min);
        r.set("seed", self.seed);
        r.set("seed_y1", self.seed_y1);
        r.set("seed_y0", self.seed_y0);
        r.set("particles", self.particles);
        r
    }

    pub fn from_kv(r: &KvRecord) -> Result<Self> {
        let u = |k: &str| -> Result<u64> { r.get_u64(k)?.ok_or_else(|| Error::Parse(format!("missing `{k}`"))) };
        Ok(Self {
            log_bf: r.require_f64("log_bf")?,
            posterior_log_odds: r.require_f64("posterior_log_odds")?,
            posterior_p1: r.require_f64("posterior_p1")?,
            prior_p1: r.require_f64("prior_p1")?,
            log_m1: r.require_f64("log_m1")?,
            log_m0: r.require_f64("log_m0")?,
            ess_min: r.require_f64("ess_min")?,
            seed: u("seed")?,
            seed_y1: u("seed_y1")?,
            seed_y0: u("seed_y0")?,
            particles: u("particles")? as usize,
        })
    }
}

/// Sub-seed for the run conditioned on outcome `y`.
pub fn outcome_seed(seed: u64, y: Outcome) -> u64 {
    derive_seed(seed, 0x5EED_0000 + y.as_u8() as u64)
}

/// Runs SMC under `y = 1` and `y = 0` with independent sub-seeds derived
/// from `seed` and combines them into the outcome posterior.
pub fn posterior_summary(
    h: &History,
    spec: &PriorSpec,
    prior_p1: f64,
    particles: usize,
    seed: u64,
) -> Result<PosteriorSummary> {
    let inc = to_increments(h)?;
    posterior_from_increments(&inc, h.volumes(), spec, prior_p1, &SmcSettings::new(particles), seed)
}

pub fn posterior_from_increments(
    inc: &IncrementPath,
    v: &[f64],
    spec: &PriorSpec,
    prior_p1: f64,
    settings: &SmcSettings,
    seed: u64,
) -> Result<PosteriorSummary> {
    if !(prior_p1 > 0.0 && prior_p1 < 1.0) {
        return Err(Error::domain(format!("prior_p1 must lie in (0, 1), got {prior_p1}")));
    }
    let seed_y1 = outcome_seed(seed, Outcome::One);
    let seed_y0 = outcome_seed(seed, Outcome::Zero);
    let (log_m1, e1) = smc_with_settings(inc, v, Outcome::One, spec, settings, &mut rng_from_seed(seed_y1))?;
    let (log_m0, e0) = smc_with_settings(inc, v, Outcome::Zero, spec, settings, &mut rng_from_seed(seed_y0))?;
    let mut out = PosteriorSummary::from_marginals(log_m1, log_m0, prior_p1)?;
    out.ess_min = e1.ess_min.min(e0.ess_min);
    out.seed = seed;
    out.seed_y1 = seed_y1;
    out.seed_y0 = seed_y0;
    out.particles = settings.particles;
    Ok(out)
}

/// Running log Bayes factors `log m_1(t) - log m_0(t)` for `t = 1..=T`
/// from one pass per outcome.
pub fn sequential_log_bf(
    inc: &IncrementPath,
    v: &[f64],
    spec: &PriorSpec,
    settings: &SmcSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    let settings = settings.clone().with_trace();
    let running = |y: Outcome| -> Result<Vec<f64>> {
        let (_, e) = smc_with_settings(inc, v, y, spec, &settings, &mut rng_from_seed(outcome_seed(seed, y)))?;
        let mut acc = 0.0;
        Ok(e.trace.iter().map(|d| {
            acc += d.log_increment;
            acc
        })
        .collect())
    };
    let m1 = running(Outcome::One)?;
    let m0 = running(Outcome::Zero)?;
    Ok(m1.iter().zip(&m0).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mixture_log_density, ModelParams};
    use proptest::prelude::*;

    #[test]
    fn uninformative_data_leaves_prior() {
        let mut th = ModelParams::paper_defaults();
        th.mu1 = 0.0;
        th.mu3 = 0.0;
        let h = History::new(vec![0.4; 11], vec![2.0; 10]).unwrap();
        let s = posterior_summary(&h, &PriorSpec::point_mass_at(&th), 0.3, 16, 1).unwrap();
        assert_eq!(s.log_bf, 0.0);
        assert!((s.posterior_p1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_step_likelihood_ratio() {
        let th = ModelParams::paper_defaults();
        let inc = IncrementPath { x0: 0.0, dx: vec![0.2] };
        let s = posterior_from_increments(&inc, &[2.0], &PriorSpec::point_mass_at(&th), 0.5, &SmcSettings::new(8), 4).unwrap();
        let expect = mixture_log_density(Outcome::One, 0.2, 2.0, &th) - mixture_log_density(Outcome::Zero, 0.2, 2.0, &th);
        assert!((s.log_bf - expect).abs() < 1e-12);
        assert!(s.log_bf > 0.0);
    }

    #[test]
    fn posterior_arithmetic() {
        let s = PosteriorSummary::from_marginals(0.4, 0.0, 0.5).unwrap();
        assert!((s.posterior_p1 - 0.598_687_660_112_452_3).abs() < 1e-12);
        assert!(PosteriorSummary::from_marginals(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let h = History::new(vec![0.5, 0.55, 0.6], vec![1.0, 1.5]).unwrap();
        let s = posterior_summary(&h, &PriorSpec::default(), 0.5, 32, 7).unwrap();
        let back = PosteriorSummary::from_kv(&KvRecord::parse(&s.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_ne!(s.seed_y1, s.seed_y0);
    }

    #[test]
    fn sequential_endpoint_matches_full_run() {
        let h = crate::simulate::simulate_history(&crate::simulate::SimConfig::new(30, Outcome::One, 9)).unwrap();
        let inc = to_increments(&h).unwrap();
        let settings = SmcSettings::new(64);
        let seq = sequential_log_bf(&inc, h.volumes(), &PriorSpec::default(), &settings, 5).unwrap();
        let full = posterior_from_increments(&inc, h.volumes(), &PriorSpec::default(), 0.5, &settings, 5).unwrap();
        assert_eq!(seq.len(), 30);
        assert!((seq[29] - full.log_bf).abs() < 1e-9);
        let th = ModelParams::paper_defaults();
        let exact = sequential_log_bf(&inc, h.volumes(), &PriorSpec::point_mass_at(&th), &settings, 5).unwrap();
        let t10 = IncrementPath { x0: inc.x0, dx: inc.dx[..10].to_vec() };
        let direct = crate::model::path_log_likelihood(Outcome::One, &t10, &h.volumes()[..10], &th).unwrap()
            - crate::model::path_log_likelihood(Outcome::Zero, &t10, &h.volumes()[..10], &th).unwrap();
        assert!((exact[9] - direct).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn odds_identity(prior in 0.001f64..0.999, bf in -12.0f64..12.0) {
            let s = PosteriorSummary::from_marginals(bf, 0.0, prior).unwrap();
            prop_assert!((s.posterior_log_odds - logit(prior).unwrap() - s.log_bf).abs() < 1e-10);
            if s.posterior_log_odds.abs() <= 13.0 {
                let lhs = logit(s.posterior_p1).unwrap() - logit(prior).unwrap() - s.log_bf;
                prop_assert!(lhs.abs() < 1e-10, "{}", lhs);
            }
        }
    }
}
