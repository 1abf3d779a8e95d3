use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{validate_params, Interval, ModelParams, ParamBounds, Scalar, ViolationKind, SCALAR_COUNT};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub(crate) fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub(crate) fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Mass of a standard normal on `[a, b]`, computed in the tail that keeps
/// relative precision.
fn norm_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        norm_cdf(-a) - norm_cdf(-b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

/// Draws a standard normal truncated to `[a, b]` by inverse CDF.
fn sample_truncated_std_normal<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if a > 0.0 {
        // reflect so the lower tail does the work
        let (lo, hi) = (norm_cdf(-b), norm_cdf(-a));
        -norm_quantile(lo + u * (hi - lo)).clamp(-b, -a)
    } else {
        let (lo, hi) = (norm_cdf(a), norm_cdf(b));
        norm_quantile(lo + u * (hi - lo)).clamp(a, b)
    }
}

/// Prior family for one scalar, always truncated to that scalar's bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarPrior {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
    /// Normal with mean zero restricted to the nonnegative half line.
    HalfNormal { scale: f64 },
    /// `log x ~ Normal(loc, scale)`.
    LogNormal { loc: f64, scale: f64 },
    Uniform,
}

impl ScalarPrior {
    pub fn is_fixed(&self) -> bool {
        matches!(self, ScalarPrior::Fixed(_))
    }

    /// Support of the truncated law.
    fn support(&self, iv: Interval) -> Interval {
        match *self {
            ScalarPrior::Fixed(x) => Interval::point(x),
            ScalarPrior::HalfNormal { .. } => Interval::new(iv.lo.max(0.0), iv.hi),
            ScalarPrior::LogNormal { .. } => Interval::new(iv.lo.max(0.0), iv.hi),
            _ => iv,
        }
    }

    /// Standardized truncation limits for the Gaussian-type families.
    fn std_limits(&self, iv: Interval) -> (f64, f64, f64, f64) {
        let sup = self.support(iv);
        match *self {
            ScalarPrior::Normal { mean, sd } => (mean, sd, (sup.lo - mean) / sd, (sup.hi - mean) / sd),
            ScalarPrior::HalfNormal { scale } => (0.0, scale, sup.lo / scale, sup.hi / scale),
            ScalarPrior::LogNormal { loc, scale } => {
                (loc, scale, (sup.lo.ln() - loc) / scale, (sup.hi.ln() - loc) / scale)
            }
            _ => unreachable!("not a Gaussian-type family"),
        }
    }

    fn validate(&self, name: &str, iv: Interval) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("prior for {name}: {msg}")));
        match *self {
            ScalarPrior::Fixed(x) => {
                if !iv.contains(x) {
                    return bad(format!("fixed value {x} outside bounds [{}, {}]", iv.lo, iv.hi));
                }
            }
            ScalarPrior::Uniform => {
                if !(iv.width() > 0.0 && iv.width().is_finite()) {
                    return bad("uniform prior needs a finite, nondegenerate interval".into());
                }
            }
            ScalarPrior::Normal { sd: s, .. }
            | ScalarPrior::HalfNormal { scale: s }
            | ScalarPrior::LogNormal { scale: s, .. } => {
                if !(s > 0.0 && s.is_finite()) {
                    return bad(format!("scale must be positive, got {s}"));
                }
                let sup = self.support(iv);
                if !(sup.hi > sup.lo) {
                    return bad("truncation leaves an empty support".into());
                }
                let (_, _, a, b) = self.std_limits(iv);
                if !(norm_mass(a, b) > 0.0) {
                    return bad("truncation leaves no probability mass".into());
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, iv: Interval, rng: &mut R) -> f64 {
        match *self {
            ScalarPrior::Fixed(x) => x,
            ScalarPrior::Uniform => iv.lo + rng.random::<f64>() * iv.width(),
            ScalarPrior::LogNormal { .. } => {
                let (loc, scale, a, b) = self.std_limits(iv);
                let sup = self.support(iv);
                (loc + scale * sample_truncated_std_normal(a, b, rng)).exp().clamp(sup.lo, sup.hi)
            }
            _ => {
                let (mean, sd, a, b) = self.std_limits(iv);
                let sup = self.support(iv);
                (mean + sd * sample_truncated_std_normal(a, b, rng)).clamp(sup.lo, sup.hi)
            }
        }
    }

    /// Normalized log density on the truncated support; `-inf` outside.
    fn log_density(&self, x: f64, iv: Interval) -> f64 {
        let sup = self.support(iv);
        if let ScalarPrior::Fixed(v) = *self {
            return if x == v { 0.0 } else { f64::NEG_INFINITY };
        }
        if !(x >= sup.lo && x <= sup.hi) {
            return f64::NEG_INFINITY;
        }
        match *self {
            ScalarPrior::Uniform => -iv.width().ln(),
            ScalarPrior::LogNormal { .. } => {
                let (loc, scale, a, b) = self.std_limits(iv);
                let z = (x.ln() - loc) / scale;
                -0.5 * z * z - LN_SQRT_2PI - scale.ln() - x.ln() - norm_mass(a, b).ln()
            }
            _ => {
                let (mean, sd, a, b) = self.std_limits(iv);
                let z = (x - mean) / sd;
                -0.5 * z * z - LN_SQRT_2PI - sd.ln() - norm_mass(a, b).ln()
            }
        }
    }

    /// d/dx of the log density inside the support.
    fn log_density_grad(&self, x: f64) -> f64 {
        match *self {
            ScalarPrior::Fixed(_) | ScalarPrior::Uniform => 0.0,
            ScalarPrior::Normal { mean, sd } => -(x - mean) / (sd * sd),
            ScalarPrior::HalfNormal { scale } => -x / (scale * scale),
            ScalarPrior::LogNormal { loc, scale } => -(x.ln() - loc) / (scale * scale * x) - 1.0 / x,
        }
    }
}

/// Prior on the base weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaPrior {
    Dirichlet([f64; 3]),
    Fixed([f64; 3]),
}

impl OmegaPrior {
    pub fn is_fixed(&self) -> bool {
        matches!(self, OmegaPrior::Fixed(_))
    }
}

pub(crate) fn dirichlet_log_density(alpha: &[f64; 3], w: &[f64; 3]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let mut out = ln_gamma(a0);
    for k in 0..3 {
        out += (alpha[k] - 1.0) * w[k].ln() - ln_gamma(alpha[k]);
    }
    out
}

/// Independent priors on `omega` and each scalar, truncated to `bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub omega: OmegaPrior,
    pub scalars: [ScalarPrior; SCALAR_COUNT],
    pub bounds: ParamBounds,
}

impl Default for PriorSpec {
    /// Dirichlet(2, 2, 2) weights; half-normal(1) drifts; log-normal(log 0.3,
    /// 0.7) rates and scales; uniform threshold; `nu` fixed at 5; standard
    /// normal gating coefficients.
    fn default() -> Self {
        let mut scalars = [ScalarPrior::Uniform; SCALAR_COUNT];
        for s in Scalar::ALL {
            scalars[s.index()] = match s {
                s if s.is_gamma() => ScalarPrior::Normal { mean: 0.0, sd: 1.0 },
                Scalar::Mu1 | Scalar::Mu3 => ScalarPrior::HalfNormal { scale: 1.0 },
                Scalar::Lambda1 | Scalar::Kappa1 | Scalar::Sigma1 | Scalar::Sigma2 | Scalar::Sigma3 => {
                    ScalarPrior::LogNormal { loc: 0.3f64.ln(), scale: 0.7 }
                }
                Scalar::Tau3 => ScalarPrior::Uniform,
                Scalar::Nu => ScalarPrior::Fixed(5.0),
                _ => unreachable!(),
            };
        }
        Self {
            omega: OmegaPrior::Dirichlet([2.0; 3]),
            scalars,
            bounds: ParamBounds::default(),
        }
    }
}

impl PriorSpec {
    /// All mass on `theta0`.
    pub fn point_mass_at(theta0: &ModelParams) -> Self {
        let mut scalars = [ScalarPrior::Uniform; SCALAR_COUNT];
        for s in Scalar::ALL {
            scalars[s.index()] = ScalarPrior::Fixed(theta0.get(s));
        }
        Self {
            omega: OmegaPrior::Fixed(theta0.omega),
            scalars,
            bounds: ParamBounds::point(theta0),
        }
    }

    /// Default spec with `nu` uniform on its bounds instead of fixed.
    pub fn with_uniform_nu(self) -> Self {
        self.with(Scalar::Nu, ScalarPrior::Uniform)
    }

    pub fn with(mut self, s: Scalar, prior: ScalarPrior) -> Self {
        self.scalars[s.index()] = prior;
        self
    }

    pub fn with_bounds(mut self, bounds: ParamBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn get(&self, s: Scalar) -> ScalarPrior {
        self.scalars[s.index()]
    }

    /// Support of scalar `s` after truncation.
    pub fn support(&self, s: Scalar) -> Interval {
        self.get(s).support(self.bounds.get(s))
    }

    pub fn validate(&self) -> Result<()> {
        for s in Scalar::ALL {
            self.get(s).validate(s.name(), self.bounds.get(s))?;
        }
        match self.omega {
            OmegaPrior::Dirichlet(a) => {
                if a.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::config("Dirichlet concentrations must be positive"));
                }
            }
            OmegaPrior::Fixed(w) => {
                if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::config("fixed omega must lie on the simplex"));
                }
            }
        }
        Ok(())
    }

    /// Scalars with a non-degenerate prior, in [`Scalar::ALL`] order.
    pub fn free_scalars(&self) -> Vec<Scalar> {
        Scalar::ALL.into_iter().filter(|s| !self.get(*s).is_fixed()).collect()
    }

    /// Named presets: `default`, `uniform-nu`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "uniform-nu" => Ok(Self::default().with_uniform_nu()),
            other => Err(Error::config(format!("unknown prior preset `{other}`"))),
        }
    }
}

pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, rng: &mut R) -> ModelParams {
    let mut theta = ModelParams::paper_defaults();
    theta.omega = match spec.omega {
        OmegaPrior::Fixed(w) => w,
        OmegaPrior::Dirichlet(alpha) => {
            let g = alpha.map(|a| Gamma::new(a, 1.0).expect("validated concentration").sample(rng));
            let total: f64 = g.iter().sum();
            let mut w = g.map(|x| x / total);
            // exact simplex sum for the validator
            w[2] = 1.0 - w[0] - w[1];
            if w[2] < 0.0 {
                w[2] = 0.0;
                let s = w[0] + w[1];
                w[0] /= s;
                w[1] = 1.0 - w[0];
            }
            w
        }
    };
    for s in Scalar::ALL {
        let x = spec.get(s).sample(spec.bounds.get(s), rng);
        theta.set(s, x);
    }
    debug_assert!(validate_params(&theta, &spec.bounds)
        .violations
        .iter()
        .all(|v| v.kind == ViolationKind::Orientation && v.bound.is_some_and(|iv| iv.lo < 0.0)));
    theta
}

/// Log prior density; point masses contribute 0 at their atom and `-inf`
/// elsewhere.
pub fn log_prior_density(spec: &PriorSpec, theta: &ModelParams) -> f64 {
    let mut out = match spec.omega {
        OmegaPrior::Fixed(w) => {
            if w == theta.omega {
                0.0
            } else {
                return f64::NEG_INFINITY;
            }
        }
        OmegaPrior::Dirichlet(alpha) => {
            if theta.omega.iter().any(|w| !(*w > 0.0)) || (theta.omega.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return f64::NEG_INFINITY;
            }
            dirichlet_log_density(&alpha, &theta.omega)
        }
    };
    for s in Scalar::ALL {
        out += spec.get(s).log_density(theta.get(s), spec.bounds.get(s));
        if out == f64::NEG_INFINITY {
            return out;
        }
    }
    out
}

/// Log density of one scalar's truncated prior.
pub fn log_scalar_prior_density(spec: &PriorSpec, s: Scalar, x: f64) -> f64 {
    spec.get(s).log_density(x, spec.bounds.get(s))
}

pub(crate) fn log_scalar_prior_grad(spec: &PriorSpec, s: Scalar, x: f64) -> f64 {
    spec.get(s).log_density_grad(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn point_mass_draws_exactly() {
        let theta0 = ModelParams::paper_defaults();
        let spec = PriorSpec::point_mass_at(&theta0);
        spec.validate().unwrap();
        let mut rng = rng_from_seed(0);
        for _ in 0..10 {
            assert_eq!(sample_prior(&spec, &mut rng), theta0);
        }
        assert_eq!(log_prior_density(&spec, &theta0), 0.0);
        let mut other = theta0.clone();
        other.mu1 += 0.01;
        assert_eq!(log_prior_density(&spec, &other), f64::NEG_INFINITY);
    }

    #[test]
    fn default_draws_are_admissible() {
        let spec = PriorSpec::default();
        spec.validate().unwrap();
        let mut rng = rng_from_seed(1);
        let mut mean = [0.0; 3];
        let n = 10_000;
        for _ in 0..n {
            let th = sample_prior(&spec, &mut rng);
            let report = validate_params(&th, &spec.bounds);
            assert!(report.is_empty(), "{report}");
            assert!(log_prior_density(&spec, &th).is_finite());
            for k in 0..3 {
                mean[k] += th.omega[k] / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.02, "{mean:?}");
        }
    }

    #[test]
    fn uniform_threshold_term() {
        let spec = PriorSpec::default();
        assert!((log_scalar_prior_density(&spec, Scalar::Tau3, 3.7) - (0.1f64).ln()).abs() < 1e-15);
        assert_eq!(log_scalar_prior_density(&spec, Scalar::Tau3, 10.5), f64::NEG_INFINITY);
    }

    #[test]
    fn density_ratio_matches_unnormalized_factors() {
        let spec = PriorSpec::default();
        let a = ModelParams::paper_defaults();
        let mut b = a.clone().with_omega([0.2, 0.5, 0.3]);
        b.mu1 = 1.1;
        b.sigma2 = 0.8;
        b.gamma[2][1] = -0.4;
        let ratio = log_prior_density(&spec, &b) - log_prior_density(&spec, &a);
        // unnormalized factors
        let dir = |w: &[f64; 3]| w.iter().map(|x| x.ln()).sum::<f64>();
        let hn = |x: f64| -0.5 * x * x;
        let ln = |x: f64| {
            let z = (x.ln() - 0.3f64.ln()) / 0.7;
            -0.5 * z * z - x.ln()
        };
        let nn = |x: f64| -0.5 * x * x;
        let expect = dir(&b.omega) - dir(&a.omega) + hn(1.1) - hn(0.5) + ln(0.8) - ln(0.5) + nn(-0.4) - nn(0.3);
        assert!((ratio - expect).abs() < 1e-12, "{ratio} vs {expect}");
    }

    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn truncated_densities_integrate_to_one() {
        let spec = PriorSpec::default();
        for s in Scalar::ALL {
            if spec.get(s).is_fixed() {
                continue;
            }
            let sup = spec.support(s);
            let mass = integrate(|x| log_scalar_prior_density(&spec, s, x).exp(), sup.lo, sup.hi, 200_000);
            assert!((mass - 1.0).abs() < 1e-6, "{}: {mass}", s.name());
        }
    }

    #[test]
    fn truncated_sampler_mean_matches_density() {
        let spec = PriorSpec::default();
        let mut rng = rng_from_seed(5);
        for s in [Scalar::Mu1, Scalar::Lambda1, Scalar::Gamma11] {
            let sup = spec.support(s);
            let mean_q = integrate(|x| x * log_scalar_prior_density(&spec, s, x).exp(), sup.lo, sup.hi, 200_000);
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_prior(&spec, &mut rng).get(s)).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((m - mean_q).abs() < 4.0 * sd / (n as f64).sqrt(), "{}: {m} vs {mean_q}", s.name());
        }
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let spec = PriorSpec::default();
        for (s, x) in [(Scalar::Mu1, 0.7), (Scalar::Sigma2, 0.4), (Scalar::Gamma21, -0.3), (Scalar::Tau3, 2.0)] {
            let h = 1e-6;
            let fd = (log_scalar_prior_density(&spec, s, x + h) - log_scalar_prior_density(&spec, s, x - h)) / (2.0 * h);
            assert!((log_scalar_prior_grad(&spec, s, x) - fd).abs() < 1e-6, "{}", s.name());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = PriorSpec::default().with(Scalar::Mu1, ScalarPrior::Fixed(7.0));
        assert!(spec.validate().unwrap_err().is_config());
        let spec = PriorSpec::default().with(Scalar::Sigma1, ScalarPrior::LogNormal { loc: 0.0, scale: -1.0 });
        assert!(spec.validate().is_err());
        assert!(PriorSpec::from_name("nope").is_err());
        assert_eq!(PriorSpec::from_name("uniform-nu").unwrap().get(Scalar::Nu), ScalarPrior::Uniform);
    }
}
