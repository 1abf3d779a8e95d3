use crate::error::{Error, Result};
use crate::kv::KvRecord;

pub const SCALAR_COUNT: usize = 15;

/// Scalar coordinates of [`ModelParams`] (everything except `omega`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scalar {
    Gamma10,
    Gamma11,
    Gamma20,
    Gamma21,
    Gamma30,
    Gamma31,
    Mu1,
    Lambda1,
    Sigma1,
    Kappa1,
    Sigma2,
    Mu3,
    Tau3,
    Sigma3,
    Nu,
}

impl Scalar {
    pub const ALL: [Scalar; SCALAR_COUNT] = [
        Scalar::Gamma10,
        Scalar::Gamma11,
        Scalar::Gamma20,
        Scalar::Gamma21,
        Scalar::Gamma30,
        Scalar::Gamma31,
        Scalar::Mu1,
        Scalar::Lambda1,
        Scalar::Sigma1,
        Scalar::Kappa1,
        Scalar::Sigma2,
        Scalar::Mu3,
        Scalar::Tau3,
        Scalar::Sigma3,
        Scalar::Nu,
    ];

    pub const SCALES: [Scalar; 3] = [Scalar::Sigma1, Scalar::Sigma2, Scalar::Sigma3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Scalar::Gamma10 => "gamma10",
            Scalar::Gamma11 => "gamma11",
            Scalar::Gamma20 => "gamma20",
            Scalar::Gamma21 => "gamma21",
            Scalar::Gamma30 => "gamma30",
            Scalar::Gamma31 => "gamma31",
            Scalar::Mu1 => "mu1",
            Scalar::Lambda1 => "lambda1",
            Scalar::Sigma1 => "sigma1",
            Scalar::Kappa1 => "kappa1",
            Scalar::Sigma2 => "sigma2",
            Scalar::Mu3 => "mu3",
            Scalar::Tau3 => "tau3",
            Scalar::Sigma3 => "sigma3",
            Scalar::Nu => "nu",
        }
    }

    pub fn from_name(name: &str) -> Option<Scalar> {
        Scalar::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn is_scale(self) -> bool {
        matches!(self, Scalar::Sigma1 | Scalar::Sigma2 | Scalar::Sigma3)
    }

    pub fn is_gamma(self) -> bool {
        self.index() < 6
    }
}

/// Full nuisance parameter: base weights, gating coefficients and
/// type-specific increment-law parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub omega: [f64; 3],
    /// `gamma[k] = [intercept, log-volume slope]` for type `k`.
    pub gamma: [[f64; 2]; 3],
    pub mu1: f64,
    pub lambda1: f64,
    pub sigma1: f64,
    pub kappa1: f64,
    pub sigma2: f64,
    pub mu3: f64,
    pub tau3: f64,
    pub sigma3: f64,
    pub nu: f64,
}

impl ModelParams {
    /// Parameter values used by the synthetic experiments.
    pub fn paper_defaults() -> Self {
        Self {
            omega: [0.4, 0.4, 0.2],
            gamma: [[0.0, 0.5], [0.0, 0.0], [0.0, 0.3]],
            mu1: 0.5,
            lambda1: 0.1,
            sigma1: 0.3,
            kappa1: 0.05,
            sigma2: 0.5,
            mu3: 0.3,
            tau3: 5.0,
            sigma3: 0.4,
            nu: 5.0,
        }
    }

    pub fn with_omega(mut self, omega: [f64; 3]) -> Self {
        self.omega = omega;
        self
    }

    pub fn get(&self, s: Scalar) -> f64 {
        match s {
            Scalar::Gamma10 => self.gamma[0][0],
            Scalar::Gamma11 => self.gamma[0][1],
            Scalar::Gamma20 => self.gamma[1][0],
            Scalar::Gamma21 => self.gamma[1][1],
            Scalar::Gamma30 => self.gamma[2][0],
            Scalar::Gamma31 => self.gamma[2][1],
            Scalar::Mu1 => self.mu1,
            Scalar::Lambda1 => self.lambda1,
            Scalar::Sigma1 => self.sigma1,
            Scalar::Kappa1 => self.kappa1,
            Scalar::Sigma2 => self.sigma2,
            Scalar::Mu3 => self.mu3,
            Scalar::Tau3 => self.tau3,
            Scalar::Sigma3 => self.sigma3,
            Scalar::Nu => self.nu,
        }
    }

    pub fn set(&mut self, s: Scalar, value: f64) {
        let slot = match s {
            Scalar::Gamma10 => &mut self.gamma[0][0],
            Scalar::Gamma11 => &mut self.gamma[0][1],
            Scalar::Gamma20 => &mut self.gamma[1][0],
            Scalar::Gamma21 => &mut self.gamma[1][1],
            Scalar::Gamma30 => &mut self.gamma[2][0],
            Scalar::Gamma31 => &mut self.gamma[2][1],
            Scalar::Mu1 => &mut self.mu1,
            Scalar::Lambda1 => &mut self.lambda1,
            Scalar::Sigma1 => &mut self.sigma1,
            Scalar::Kappa1 => &mut self.kappa1,
            Scalar::Sigma2 => &mut self.sigma2,
            Scalar::Mu3 => &mut self.mu3,
            Scalar::Tau3 => &mut self.tau3,
            Scalar::Sigma3 => &mut self.sigma3,
            Scalar::Nu => &mut self.nu,
        };
        *slot = value;
    }

    pub fn to_kv(&self) -> KvRecord {
        let mut rec = KvRecord::new();
        for (k, w) in self.omega.iter().enumerate() {
            rec.set_f64(&format!("omega{}", k + 1), *w);
        }
        for s in Scalar::ALL {
            rec.set_f64(s.name(), self.get(s));
        }
        rec
    }

    /// Reads every parameter key from `rec`. All keys are required.
    pub fn from_kv(rec: &KvRecord) -> Result<Self> {
        let mut theta = ModelParams::paper_defaults();
        for k in 0..3 {
            theta.omega[k] = rec.require_f64(&format!("omega{}", k + 1))?;
        }
        for s in Scalar::ALL {
            theta.set(s, rec.require_f64(s.name())?);
        }
        Ok(theta)
    }

    /// Overrides whichever parameter keys are present in `rec`.
    pub fn overridden_by(mut self, rec: &KvRecord) -> Result<Self> {
        for k in 0..3 {
            if let Some(w) = rec.get_f64(&format!("omega{}", k + 1))? {
                self.omega[k] = w;
            }
        }
        for s in Scalar::ALL {
            if let Some(x) = rec.get_f64(s.name())? {
                self.set(s, x);
            }
        }
        Ok(self)
    }

    pub fn is_param_key(key: &str) -> bool {
        matches!(key, "omega1" | "omega2" | "omega3") || Scalar::from_name(key).is_some()
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_degenerate(&self) -> bool {
        self.hi <= self.lo
    }
}

/// Compact constrained parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBounds {
    intervals: [Interval; SCALAR_COUNT],
}

impl Default for ParamBounds {
    fn default() -> Self {
        let mut intervals = [Interval::new(-3.0, 3.0); SCALAR_COUNT];
        for s in Scalar::ALL {
            intervals[s.index()] = match s {
                s if s.is_gamma() => Interval::new(-3.0, 3.0),
                Scalar::Mu1 | Scalar::Mu3 => Interval::new(0.0, 3.0),
                Scalar::Lambda1 | Scalar::Kappa1 => Interval::new(1e-4, 5.0),
                Scalar::Sigma1 | Scalar::Sigma2 | Scalar::Sigma3 => Interval::new(0.05, 3.0),
                Scalar::Tau3 => Interval::new(0.0, 10.0),
                Scalar::Nu => Interval::new(3.0, 20.0),
                _ => unreachable!(),
            };
        }
        Self { intervals }
    }
}

impl ParamBounds {
    /// Validates `lo <= hi`, positive scale floor and `nu_min > 2`.
    pub fn new(intervals: [Interval; SCALAR_COUNT]) -> Result<Self> {
        for s in Scalar::ALL {
            let iv = intervals[s.index()];
            if !(iv.lo <= iv.hi) {
                return Err(Error::config(format!("{}: lower bound above upper", s.name())));
            }
            if s.is_scale() && !(iv.lo > 0.0) {
                return Err(Error::config(format!("{}: scale floor must be positive", s.name())));
            }
        }
        if !(intervals[Scalar::Nu.index()].lo > 2.0) {
            return Err(Error::config("nu lower bound must exceed 2"));
        }
        for s in [Scalar::Lambda1, Scalar::Kappa1, Scalar::Tau3] {
            if intervals[s.index()].lo < 0.0 {
                return Err(Error::config(format!("{} must be nonnegative", s.name())));
            }
        }
        Ok(Self { intervals })
    }

    /// Every scalar pinned to its value in `theta`.
    pub fn point(theta: &ModelParams) -> Self {
        let mut intervals = [Interval::point(0.0); SCALAR_COUNT];
        for s in Scalar::ALL {
            intervals[s.index()] = Interval::point(theta.get(s));
        }
        Self { intervals }
    }

    pub fn get(&self, s: Scalar) -> Interval {
        self.intervals[s.index()]
    }

    pub fn with(mut self, s: Scalar, iv: Interval) -> Self {
        self.intervals[s.index()] = iv;
        self
    }

    pub fn sigma_min(&self) -> f64 {
        Scalar::SCALES.iter().map(|s| self.get(*s).lo).fold(f64::INFINITY, f64::min)
    }

    pub fn sigma_max(&self) -> f64 {
        Scalar::SCALES.iter().map(|s| self.get(*s).hi).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn nu_min(&self) -> f64 {
        self.get(Scalar::Nu).lo
    }

    pub fn contains(&self, theta: &ModelParams) -> bool {
        validate_params(theta, self).is_empty()
    }

    /// Nearest point of the box (omega untouched).
    pub fn clamp(&self, theta: &ModelParams) -> ModelParams {
        let mut out = theta.clone();
        for s in Scalar::ALL {
            let iv = self.get(s);
            out.set(s, theta.get(s).clamp(iv.lo, iv.hi));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// A drift magnitude is negative.
    Orientation,
    /// A scale is at or below its floor (or nonpositive).
    ScaleLower,
    /// Value below the lower bound.
    BelowLower,
    /// Value above the upper bound.
    AboveUpper,
    /// `omega` is not on the simplex.
    Simplex,
    /// Value is NaN or infinite.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub value: f64,
    pub kind: ViolationKind,
    pub bound: Option<Interval>,
}

/// Every violated constraint; empty iff the parameters are admissible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn has_field(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "ok");
        }
        for v in &self.violations {
            match v.bound {
                Some(b) => writeln!(f, "{}: {:?} (value {}, bounds [{}, {}])", v.field, v.kind, v.value, b.lo, b.hi)?,
                None => writeln!(f, "{}: {:?} (value {})", v.field, v.kind, v.value)?,
            }
        }
        Ok(())
    }
}

/// Checks orientation, simplex and box constraints.
pub fn validate_params(theta: &ModelParams, bounds: &ParamBounds) -> ValidationReport {
    let mut violations = Vec::new();

    let sum: f64 = theta.omega.iter().sum();
    for (k, &w) in theta.omega.iter().enumerate() {
        let field = format!("omega{}", k + 1);
        if !w.is_finite() {
            violations.push(Violation { field, value: w, kind: ViolationKind::NonFinite, bound: None });
        } else if w < 0.0 {
            violations.push(Violation { field, value: w, kind: ViolationKind::Simplex, bound: None });
        }
    }
    if !((sum - 1.0).abs() <= 1e-12) {
        violations.push(Violation {
            field: "omega".into(),
            value: sum,
            kind: ViolationKind::Simplex,
            bound: None,
        });
    }

    for s in Scalar::ALL {
        let x = theta.get(s);
        let iv = bounds.get(s);
        let field = s.name().to_string();
        if !x.is_finite() {
            violations.push(Violation { field, value: x, kind: ViolationKind::NonFinite, bound: Some(iv) });
            continue;
        }
        if matches!(s, Scalar::Mu1 | Scalar::Mu3) && x < 0.0 {
            violations.push(Violation { field: field.clone(), value: x, kind: ViolationKind::Orientation, bound: Some(iv) });
        }
        if s.is_scale() && (x <= 0.0 || x < iv.lo) {
            violations.push(Violation { field, value: x, kind: ViolationKind::ScaleLower, bound: Some(iv) });
            continue;
        }
        if x < iv.lo {
            violations.push(Violation { field, value: x, kind: ViolationKind::BelowLower, bound: Some(iv) });
        } else if x > iv.hi {
            violations.push(Violation { field, value: x, kind: ViolationKind::AboveUpper, bound: Some(iv) });
        }
    }

    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let report = validate_params(&ModelParams::paper_defaults(), &ParamBounds::default());
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn negative_drift_is_orientation_violation() {
        let mut theta = ModelParams::paper_defaults();
        theta.mu1 = -0.1;
        let report = validate_params(&theta, &ParamBounds::default());
        assert!(report.has(ViolationKind::Orientation));
        assert!(report.has_field("mu1"));
    }

    #[test]
    fn zero_scale_is_reported() {
        let mut theta = ModelParams::paper_defaults();
        theta.sigma2 = 0.0;
        let report = validate_params(&theta, &ParamBounds::default());
        assert!(report.has(ViolationKind::ScaleLower));
        assert!(report.has_field("sigma2"));
    }

    #[test]
    fn every_violation_listed() {
        let mut theta = ModelParams::paper_defaults();
        theta.omega = [0.5, 0.5, 0.5];
        theta.nu = 50.0;
        theta.tau3 = -1.0;
        let report = validate_params(&theta, &ParamBounds::default());
        assert!(report.has(ViolationKind::Simplex));
        assert!(report.has_field("nu"));
        assert!(report.has_field("tau3"));
        assert_eq!(report.violations.len(), 3);
    }

    #[test]
    fn bounds_invariants() {
        let b = ParamBounds::default();
        assert_eq!(b.sigma_min(), 0.05);
        assert_eq!(b.sigma_max(), 3.0);
        assert_eq!(b.nu_min(), 3.0);
        let mut iv = [Interval::new(0.0, 1.0); SCALAR_COUNT];
        iv[Scalar::Nu.index()] = Interval::new(3.0, 4.0);
        for s in Scalar::SCALES {
            iv[s.index()] = Interval::new(0.1, 1.0);
        }
        assert!(ParamBounds::new(iv).is_ok());
        iv[Scalar::Nu.index()] = Interval::new(2.0, 4.0);
        assert!(ParamBounds::new(iv).is_err());
        iv[Scalar::Nu.index()] = Interval::new(3.0, 4.0);
        iv[Scalar::Sigma1.index()] = Interval::new(0.0, 1.0);
        assert!(ParamBounds::new(iv).is_err());
        iv[Scalar::Sigma1.index()] = Interval::new(2.0, 1.0);
        assert!(ParamBounds::new(iv).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let theta = ModelParams::paper_defaults();
        let rec = theta.to_kv();
        let keys: Vec<&str> = rec.keys().collect();
        assert_eq!(
            keys,
            vec![
                "omega1", "omega2", "omega3", "gamma10", "gamma11", "gamma20", "gamma21", "gamma30",
                "gamma31", "mu1", "lambda1", "sigma1", "kappa1", "sigma2", "mu3", "tau3", "sigma3", "nu"
            ]
        );
        let back = ModelParams::from_kv(&KvRecord::parse(&rec.to_string()).unwrap()).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn kv_missing_key_errors() {
        let rec = KvRecord::parse("omega1 = 1").unwrap();
        assert!(ModelParams::from_kv(&rec).is_err());
    }
}
