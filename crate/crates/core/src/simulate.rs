//! Forward simulation of volume designs and price-volume histories.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::kv::fmt_f64;
use crate::logodds::{logit, to_increments, History, IncrementPath};
use crate::model::{ModelParams, Outcome, PreparedParams};
use crate::rng::{rng_from_seed, SimRng};

/// Log-odds magnitude treated as a simulation fault.
pub const MAX_LOG_ODDS: f64 = 700.0;

/// How the volume path `v_{1:T}` is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeDesign {
    GammaIid { shape: f64, scale: f64 },
    Constant(f64),
    Explicit(Vec<f64>),
}

impl Default for VolumeDesign {
    /// Gamma with shape 2 and scale 0.5 (mean 1).
    fn default() -> Self {
        VolumeDesign::GammaIid { shape: 2.0, scale: 0.5 }
    }
}

impl VolumeDesign {
    pub fn validate(&self) -> Result<()> {
        match self {
            VolumeDesign::GammaIid { shape, scale } => {
                if !(*shape > 0.0 && *scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(Error::config(format!("gamma design needs positive shape/scale, got {shape}/{scale}")));
                }
            }
            VolumeDesign::Constant(v) => {
                if !(*v >= 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("constant volume must be >= 0, got {v}")));
                }
            }
            VolumeDesign::Explicit(vs) => {
                if let Some(bad) = vs.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                    return Err(Error::config(format!("explicit volume {bad} is invalid")));
                }
            }
        }
        Ok(())
    }
}

pub fn sample_volumes<R: Rng + ?Sized>(design: &VolumeDesign, horizon: usize, rng: &mut R) -> Result<Vec<f64>> {
    design.validate()?;
    match design {
        VolumeDesign::GammaIid { shape, scale } => {
            let g = Gamma::new(*shape, *scale).map_err(|e| Error::config(e.to_string()))?;
            Ok((0..horizon).map(|_| g.sample(rng)).collect())
        }
        VolumeDesign::Constant(v) => Ok(vec![*v; horizon]),
        VolumeDesign::Explicit(vs) => {
            if vs.len() != horizon {
                return Err(Error::LengthMismatch { what: "explicit volumes vs horizon", left: vs.len(), right: horizon });
            }
            Ok(vs.clone())
        }
    }
}

/// Everything needed to generate one synthetic history.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub horizon: usize,
    pub outcome: Outcome,
    pub p0: f64,
    pub theta: ModelParams,
    pub design: VolumeDesign,
    pub seed: u64,
}

impl SimConfig {
    /// Paper-default parameters, Gamma(2, 0.5) volumes, `p0 = 0.5`.
    pub fn new(horizon: usize, outcome: Outcome, seed: u64) -> Self {
        Self {
            horizon,
            outcome,
            p0: 0.5,
            theta: ModelParams::paper_defaults(),
            design: VolumeDesign::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::config(format!("p0 must lie in (0, 1), got {}", self.p0)));
        }
        self.design.validate()
    }
}

/// Simulates a history: volumes first, then increments, accumulated in
/// log-odds and mapped back to prices.
pub fn simulate_history(cfg: &SimConfig) -> Result<History> {
    let prep = PreparedParams::new(&cfg.theta);
    simulate_history_with(cfg, |y, v, rng| prep.step_law(y, v).sample(rng))
}

/// Like [`simulate_history`] with a caller-supplied increment sampler.
pub fn simulate_history_with<F>(cfg: &SimConfig, mut increment: F) -> Result<History>
where
    F: FnMut(Outcome, f64, &mut SimRng) -> f64,
{
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let volumes = sample_volumes(&cfg.design, cfg.horizon, &mut rng)?;
    let x0 = logit(cfg.p0)?;
    let mut x = x0;
    let mut path = Vec::with_capacity(cfg.horizon + 1);
    path.push(x0);
    for (t, &v) in volumes.iter().enumerate() {
        x += increment(cfg.outcome, v, &mut rng);
        if !(x.abs() <= MAX_LOG_ODDS) {
            return Err(Error::SimulationFault { step: t + 1, log_odds: x });
        }
        path.push(x);
    }
    let mut h = History::from_log_odds(path, volumes)?;
    h.set_initial_price(cfg.p0);
    Ok(h)
}

/// A perturbed history and how many perturbations were rejected because the
/// reconstructed prices left (0, 1).
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub history: History,
    pub resamples: usize,
}

const MAX_PERTURB_ATTEMPTS: usize = 10_000;

/// Adds i.i.d. `N(0, sigma^2)` noise to every log-odds increment. Volumes and
/// `p_0` are unchanged.
pub fn perturb_increments<R: Rng + ?Sized>(h: &History, sigma: f64, rng: &mut R) -> Result<Perturbed> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("perturbation scale must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Perturbed { history: h.clone(), resamples: 0 });
    }
    let inc = to_increments(h)?;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
    for attempt in 0..MAX_PERTURB_ATTEMPTS {
        let dx = inc.dx.iter().map(|d| d + noise.sample(rng)).collect();
        let candidate = IncrementPath { x0: inc.x0, dx };
        let mut history = candidate.to_history(h.volumes().to_vec())?;
        if history.prices_representable() {
            history.set_initial_price(h.prices()[0]);
            return Ok(Perturbed { history, resamples: attempt });
        }
    }
    Err(Error::domain("perturbation kept leaving (0, 1); giving up"))
}

/// Writes `t,p,v` rows; the volume cell is empty at `t = 0`. Histories whose
/// prices round to 0 or 1 cannot be written faithfully and are rejected.
pub fn write_history_csv<W: Write>(h: &History, w: W) -> Result<()> {
    if !h.prices_representable() {
        return Err(Error::domain("history has prices that round to 0 or 1"));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "p", "v"])?;
    out.write_record(["0".to_string(), fmt_f64(h.prices()[0]), String::new()])?;
    for t in 1..=h.horizon() {
        out.write_record([t.to_string(), fmt_f64(h.prices()[t]), fmt_f64(h.volumes()[t - 1])])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_csv<R: Read>(r: R) -> Result<History> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "p", "v"] {
        return Err(Error::Parse(format!("expected header `t,p,v`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut p = Vec::new();
    let mut v = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let t: usize = rec[0].trim().parse().map_err(|_| Error::Parse(format!("row {i}: bad t")))?;
        if t != i {
            return Err(Error::Parse(format!("row {i}: expected t = {i}, got {t}")));
        }
        p.push(rec[1].trim().parse::<f64>().map_err(|_| Error::Parse(format!("row {i}: bad p")))?);
        let vcell = rec[2].trim();
        if t == 0 {
            if !vcell.is_empty() {
                return Err(Error::Parse("volume must be empty at t = 0".into()));
            }
        } else {
            v.push(vcell.parse::<f64>().map_err(|_| Error::Parse(format!("row {i}: bad v")))?);
        }
    }
    if p.is_empty() {
        return Err(Error::Parse("history has no rows".into()));
    }
    History::new(p, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gate_weights;
    use proptest::prelude::*;

    #[test]
    fn constant_and_explicit_designs() {
        let mut rng = rng_from_seed(0);
        assert_eq!(sample_volumes(&VolumeDesign::Constant(2.0), 3, &mut rng).unwrap(), vec![2.0; 3]);
        let e = VolumeDesign::Explicit(vec![1.0, 2.0, 3.0]);
        assert_eq!(sample_volumes(&e, 3, &mut rng).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(sample_volumes(&e, 4, &mut rng).is_err());
        assert!(sample_volumes(&VolumeDesign::GammaIid { shape: -1.0, scale: 1.0 }, 3, &mut rng).is_err());
        assert!(sample_volumes(&VolumeDesign::Explicit(vec![-1.0]), 1, &mut rng).is_err());
    }

    #[test]
    fn gamma_design_mean() {
        let mut rng = rng_from_seed(1);
        let v = sample_volumes(&VolumeDesign::default(), 1_000_000, &mut rng).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.005, "{mean}");
        assert!(v.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn zero_increments_keep_price_fixed() {
        let cfg = SimConfig::new(20, Outcome::One, 3);
        let h = simulate_history_with(&cfg, |_, _, _| 0.0).unwrap();
        assert!(h.prices().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SimConfig::new(200, Outcome::One, 99);
        assert_eq!(simulate_history(&cfg).unwrap(), simulate_history(&cfg).unwrap());
        let other = SimConfig { seed: 100, ..cfg.clone() };
        assert_ne!(simulate_history(&cfg).unwrap(), simulate_history(&other).unwrap());
    }

    #[test]
    fn runaway_log_odds_is_a_fault() {
        let cfg = SimConfig::new(10, Outcome::One, 3);
        let err = simulate_history_with(&cfg, |_, _, _| 100.0).unwrap_err();
        assert!(matches!(err, Error::SimulationFault { .. }));
    }

    #[test]
    fn reconstruction_matches() {
        let cfg = SimConfig::new(300, Outcome::Zero, 8);
        let h = simulate_history(&cfg).unwrap();
        assert_eq!(h.prices()[0], 0.5);
        let back = to_increments(&h).unwrap().reconstruct().unwrap();
        for (a, b) in h.prices().iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_toward_truth() {
        let mut terminal = 0.0;
        let reps = 1000;
        for r in 0..reps {
            let h = simulate_history(&SimConfig::new(500, Outcome::One, 10_000 + r)).unwrap();
            terminal += h.prices()[500];
        }
        assert!(terminal / reps as f64 > 0.5);
    }

    #[test]
    fn increment_moments_at_constant_volume() {
        // Per-step mean equals the gate-weighted drift. A 10^5-step path
        // would overflow the log-odds range, so steps are drawn in blocks.
        let theta = ModelParams::paper_defaults();
        let mut dx = Vec::new();
        for block in 0..100 {
            let cfg = SimConfig {
                design: VolumeDesign::Constant(2.0),
                ..SimConfig::new(1000, Outcome::One, 21 + block)
            };
            dx.extend(to_increments(&simulate_history(&cfg).unwrap()).unwrap().dx);
        }
        let n = dx.len() as f64;
        let mean = dx.iter().sum::<f64>() / n;
        let var = dx.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let rho = gate_weights(2.0, &theta);
        let drift = rho[0] * 0.5 * (1.0 - (-0.2f64).exp());
        assert!((mean - drift).abs() < 3.0 * (var / n).sqrt(), "mean {mean} drift {drift}");
    }

    #[test]
    fn perturbation_contract() {
        let h = simulate_history(&SimConfig::new(100, Outcome::One, 4)).unwrap();
        let mut rng = rng_from_seed(4);
        let same = perturb_increments(&h, 0.0, &mut rng).unwrap();
        assert_eq!(same.history, h);
        assert_eq!(same.resamples, 0);

        let base = to_increments(&h).unwrap();
        let trials = 400;
        let mut total = 0.0;
        for _ in 0..trials {
            let p = perturb_increments(&h, 0.1, &mut rng).unwrap();
            assert_eq!(p.history.volumes(), h.volumes());
            assert_eq!(p.history.prices()[0], h.prices()[0]);
            let pert = to_increments(&p.history).unwrap();
            total += base.dx.iter().zip(&pert.dx).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        let mean = total / trials as f64;
        let expect = 100.0 * 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        // sd of one trial's sum is 0.1 * sqrt(100 * (1 - 2/pi)) ~ 0.6
        assert!((mean - expect).abs() < 0.15, "{mean} vs {expect}");
        assert!(perturb_increments(&h, -1.0, &mut rng).is_err());
    }

    #[test]
    fn csv_shape() {
        let h = History::new(vec![0.5, 0.6], vec![1.5]).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,p,v");
        assert!(lines[1].starts_with("0,") && lines[1].ends_with(','));
        assert!(read_history_csv("t,p\n0,0.5\n".as_bytes()).is_err());
        assert!(read_history_csv("t,p,v\n0,0.5,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(seed in 0u64..1000, horizon in 1usize..40) {
            let h = simulate_history(&SimConfig::new(horizon, Outcome::One, seed)).unwrap();
            let mut buf = Vec::new();
            write_history_csv(&h, &mut buf).unwrap();
            let back = read_history_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, h);
        }
    }
}
