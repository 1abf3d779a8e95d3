use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use statrs::function::gamma::{digamma, ln_gamma};

use super::params::{ModelParams, Scalar, SCALAR_COUNT};
use super::{Outcome, TraderType};
use crate::error::{Error, Result};
use crate::logodds::IncrementPath;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
fn log_sum_exp3(a: [f64; 3]) -> f64 {
    let m = a[0].max(a[1]).max(a[2]);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a[0] - m).exp() + (a[1] - m).exp() + (a[2] - m).exp()).ln()
}

/// Per-parameter constants hoisted out of the per-step density.
#[derive(Debug, Clone)]
pub struct PreparedParams {
    theta: ModelParams,
    log_omega: [f64; 3],
    t_log_norm: f64,
    /// d(t_log_norm)/d(nu)
    t_log_norm_dnu: f64,
    ln_sigma: [f64; 3],
}

impl PreparedParams {
    pub fn new(theta: &ModelParams) -> Self {
        let nu = theta.nu;
        let t_log_norm =
            ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
        let t_log_norm_dnu = 0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) - 0.5 / nu;
        Self {
            theta: theta.clone(),
            log_omega: theta.omega.map(f64::ln),
            t_log_norm,
            t_log_norm_dnu,
            ln_sigma: [theta.sigma1.ln(), theta.sigma2.ln(), theta.sigma3.ln()],
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.theta
    }

    /// Gate logits `log(omega_k) + gamma_k0 + gamma_k1 log(1 + v)`.
    #[inline]
    fn gate_logits(&self, v: f64) -> [f64; 3] {
        let lv = v.ln_1p();
        let g = &self.theta.gamma;
        [
            self.log_omega[0] + g[0][0] + g[0][1] * lv,
            self.log_omega[1] + g[1][0] + g[1][1] * lv,
            self.log_omega[2] + g[2][0] + g[2][1] * lv,
        ]
    }

    #[inline]
    fn informed_loc_scale(&self, y: Outcome, v: f64) -> (f64, f64) {
        let th = &self.theta;
        let loc = th.mu1 * y.sign() * -(-th.lambda1 * v).exp_m1();
        let scale = th.sigma1 / (1.0 + th.kappa1 * v).sqrt();
        (loc, scale)
    }

    #[inline]
    fn manipulator_active(&self, v: f64) -> bool {
        v > self.theta.tau3
    }

    /// The increment law at one period.
    pub fn step_law(&self, y: Outcome, v: f64) -> StepLaw {
        let logits = self.gate_logits(v);
        let norm = log_sum_exp3(logits);
        let (m1, s1) = self.informed_loc_scale(y, v);
        let th = &self.theta;
        let m3 = if self.manipulator_active(v) { -th.mu3 * y.sign() } else { 0.0 };
        let scale = [s1, th.sigma2, th.sigma3];
        StepLaw {
            log_weight: logits.map(|l| l - norm),
            loc: [m1, 0.0, m3],
            scale,
            log_scale: scale.map(f64::ln),
            nu: th.nu,
            t_log_norm: self.t_log_norm,
        }
    }

    /// Mixture log density; same value as `step_law(y, v).log_density(dx)`
    /// with fewer transcendental calls.
    #[inline]
    pub fn log_density(&self, y: Outcome, dx: f64, v: f64) -> f64 {
        let th = &self.theta;
        let logits = self.gate_logits(v);
        let sign = y.sign();

        let q = th.kappa1 * v;
        let m1 = th.mu1 * sign * -(-th.lambda1 * v).exp_m1();
        let z1 = (dx - m1) * (1.0 + q).sqrt() / th.sigma1;
        let c0 = logits[0] - self.ln_sigma[0] + 0.5 * q.ln_1p() - 0.5 * z1 * z1;

        let z2 = dx / th.sigma2;
        let c1 = logits[1] - self.ln_sigma[1] - 0.5 * z2 * z2;

        let m3 = if self.manipulator_active(v) { -th.mu3 * sign } else { 0.0 };
        let z3 = (dx - m3) / th.sigma3;
        let c2 = logits[2] - self.ln_sigma[2] + self.t_log_norm + HALF_LN_2PI
            - 0.5 * (th.nu + 1.0) * (z3 * z3 / th.nu).ln_1p();

        log_sum_exp3([c0, c1, c2]) - log_sum_exp3(logits) - HALF_LN_2PI
    }

    /// Log density plus its gradient with respect to every parameter
    /// (accumulated into `grad`). The threshold `tau3` enters only through an
    /// indicator, so its pathwise derivative is zero.
    pub fn log_density_with_gradient(
        &self,
        y: Outcome,
        x: f64,
        v: f64,
        grad: &mut ParamGradient,
    ) -> f64 {
        let th = &self.theta;
        let lv = v.ln_1p();
        let logits = self.gate_logits(v);
        let law = self.step_law(y, v);
        let comps = [
            law.component_log_density(0, x),
            law.component_log_density(1, x),
            law.component_log_density(2, x),
        ];
        let joint = [logits[0] + comps[0], logits[1] + comps[1], logits[2] + comps[2]];
        let lse_joint = log_sum_exp3(joint);
        let lse_gate = log_sum_exp3(logits);
        let value = lse_joint - lse_gate;

        let mut resp = [0.0; 3];
        for k in 0..3 {
            resp[k] = (joint[k] - lse_joint).exp();
            let gate = (logits[k] - lse_gate).exp();
            let diff = resp[k] - gate;
            grad.scalars[2 * k] += diff;
            grad.scalars[2 * k + 1] += diff * lv;
            // d/d(omega_k) without dividing by omega_k.
            let a = th.gamma[k][0] + th.gamma[k][1] * lv;
            grad.omega[k] += (a + comps[k] - lse_joint).exp() - (a - lse_gate).exp();
        }

        // Informed component.
        let (m1, s1) = (law.loc[0], law.scale[0]);
        let z1 = (x - m1) / s1;
        let dc_dm = z1 / s1;
        let dc_ds = (z1 * z1 - 1.0) / s1;
        let decay = (-th.lambda1 * v).exp();
        let sign = y.sign();
        let root = (1.0 + th.kappa1 * v).sqrt();
        grad.scalars[Scalar::Mu1.index()] += resp[0] * dc_dm * sign * (1.0 - decay);
        grad.scalars[Scalar::Lambda1.index()] += resp[0] * dc_dm * th.mu1 * sign * v * decay;
        grad.scalars[Scalar::Sigma1.index()] += resp[0] * dc_ds / root;
        grad.scalars[Scalar::Kappa1.index()] +=
            resp[0] * dc_ds * (-0.5 * th.sigma1 * v / (root * root * root));

        // Noise component.
        let z2 = x / th.sigma2;
        grad.scalars[Scalar::Sigma2.index()] += resp[1] * (z2 * z2 - 1.0) / th.sigma2;

        // Manipulator component.
        let nu = th.nu;
        let z3 = (x - law.loc[2]) / th.sigma3;
        let w = nu + z3 * z3;
        if self.manipulator_active(v) {
            let dc_dm3 = (nu + 1.0) * z3 / (w * th.sigma3);
            grad.scalars[Scalar::Mu3.index()] += resp[2] * dc_dm3 * (-sign);
        }
        grad.scalars[Scalar::Sigma3.index()] +=
            resp[2] * (-1.0 + (nu + 1.0) * z3 * z3 / w) / th.sigma3;
        grad.scalars[Scalar::Nu.index()] += resp[2]
            * (self.t_log_norm_dnu - 0.5 * (z3 * z3 / nu).ln_1p()
                + (nu + 1.0) * z3 * z3 / (2.0 * nu * w));

        value
    }
}

/// Gradient of a log density with respect to `omega` and the scalar
/// coordinates (indexed by [`Scalar::index`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub omega: [f64; 3],
    pub scalars: [f64; SCALAR_COUNT],
}

impl Default for ParamGradient {
    fn default() -> Self {
        Self { omega: [0.0; 3], scalars: [0.0; SCALAR_COUNT] }
    }
}

impl ParamGradient {
    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Mixture law of one increment at fixed `(y, v, theta)`.
#[derive(Debug, Clone)]
pub struct StepLaw {
    /// Normalized log gate weights.
    pub log_weight: [f64; 3],
    pub loc: [f64; 3],
    pub scale: [f64; 3],
    log_scale: [f64; 3],
    nu: f64,
    t_log_norm: f64,
}

impl StepLaw {
    /// Component density without the gate weight, `k` zero-based.
    #[inline]
    pub fn component_log_density(&self, k: usize, x: f64) -> f64 {
        let z = (x - self.loc[k]) / self.scale[k];
        if k < 2 {
            -self.log_scale[k] - HALF_LN_2PI - 0.5 * z * z
        } else {
            -self.log_scale[k] + self.t_log_norm
                - 0.5 * (self.nu + 1.0) * (z * z / self.nu).ln_1p()
        }
    }

    #[inline]
    pub fn log_density(&self, x: f64) -> f64 {
        log_sum_exp3([
            self.log_weight[0] + self.component_log_density(0, x),
            self.log_weight[1] + self.component_log_density(1, x),
            self.log_weight[2] + self.component_log_density(2, x),
        ])
    }

    pub fn weights(&self) -> [f64; 3] {
        self.log_weight.map(f64::exp)
    }

    /// Ancestral draw: type from the gate, then the increment.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let w = self.weights();
        let k = if u < w[0] {
            0
        } else if u < w[0] + w[1] {
            1
        } else {
            2
        };
        let eps: f64 = if k < 2 {
            StandardNormal.sample(rng)
        } else {
            StudentT::new(self.nu).expect("nu > 0").sample(rng)
        };
        self.loc[k] + self.scale[k] * eps
    }
}

/// Volume-dependent softmax gate weights `rho_k(v)`.
pub fn gate_weights(v: f64, theta: &ModelParams) -> [f64; 3] {
    let logits = PreparedParams::new(theta).gate_logits(v);
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = logits.map(|l| (l - m).exp());
    let total: f64 = e.iter().sum();
    e.map(|x| x / total)
}

/// `log f_{k,y}(dx | v, theta_k)`.
pub fn component_log_density(
    k: TraderType,
    y: Outcome,
    dx: f64,
    v: f64,
    theta: &ModelParams,
) -> f64 {
    PreparedParams::new(theta)
        .step_law(y, v)
        .component_log_density(k.index(), dx)
}

/// `log sum_k rho_k(v) f_{k,y}(dx | v)`.
pub fn mixture_log_density(y: Outcome, dx: f64, v: f64, theta: &ModelParams) -> f64 {
    PreparedParams::new(theta).log_density(y, dx, v)
}

pub fn sample_increment<R: Rng + ?Sized>(
    y: Outcome,
    v: f64,
    theta: &ModelParams,
    rng: &mut R,
) -> f64 {
    PreparedParams::new(theta).step_law(y, v).sample(rng)
}

/// Sum of per-step mixture log densities.
pub fn path_log_likelihood(
    y: Outcome,
    inc: &IncrementPath,
    v: &[f64],
    theta: &ModelParams,
) -> Result<f64> {
    if inc.dx.len() != v.len() {
        return Err(Error::LengthMismatch { what: "increments vs volumes", left: inc.dx.len(), right: v.len() });
    }
    let prep = PreparedParams::new(theta);
    Ok(inc
        .dx
        .iter()
        .zip(v)
        .map(|(&dx, &vt)| prep.log_density(y, dx, vt))
        .sum())
}

/// Gate-weighted drift separation `sum_k rho_k(v) (m_{k,1}(v) - m_{k,0}(v))`.
pub fn effective_informativeness(v: f64, theta: &ModelParams) -> f64 {
    let prep = PreparedParams::new(theta);
    let up = prep.step_law(Outcome::One, v);
    let down = prep.step_law(Outcome::Zero, v);
    let rho = up.weights();
    (0..3).map(|k| rho[k] * (up.loc[k] - down.loc[k])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn defaults() -> ModelParams {
        ModelParams::paper_defaults()
    }

    #[test]
    fn fast_density_matches_step_law() {
        let mut th = defaults().with_omega([0.2, 0.5, 0.3]);
        th.tau3 = 1.0;
        th.nu = 7.5;
        let prep = PreparedParams::new(&th);
        for y in Outcome::BOTH {
            for v in [0.0, 0.5, 2.0, 8.0] {
                for dx in [-3.0, -0.4, 0.0, 0.1, 1.2, 9.0] {
                    let a = prep.log_density(y, dx, v);
                    let b = prep.step_law(y, v).log_density(dx);
                    assert!((a - b).abs() < 1e-12, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn gate_reduces_to_base_weights() {
        let mut th = defaults();
        th.gamma = [[0.0; 2]; 3];
        for v in [0.0, 1.0, 17.0] {
            let w = gate_weights(v, &th);
            for (a, b) in w.iter().zip([0.4, 0.4, 0.2]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let th = defaults().with_omega([1.0, 0.0, 0.0]);
        assert_eq!(gate_weights(3.0, &th), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_at_defaults_matches_hand_evaluation() {
        let w = gate_weights(2.0, &defaults());
        let raw = [0.4 * 3f64.powf(0.5), 0.4, 0.2 * 3f64.powf(0.3)];
        let total: f64 = raw.iter().sum();
        for k in 0..3 {
            assert!((w[k] - raw[k] / total).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_simplex_over_volume_grid() {
        let th = defaults();
        for v in [0.0, 1e-3, 0.5, 1.0, 10.0, 1e3, 1e6] {
            let w = gate_weights(v, &th);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn noise_component_at_zero() {
        let th = defaults();
        for y in Outcome::BOTH {
            for v in [0.0, 2.0, 9.0] {
                let l = component_log_density(TraderType::Noise, y, 0.0, v, &th);
                assert!((l - (-0.225_791_352_644_727_4)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn informed_component_location_and_scale() {
        let th = defaults();
        let law = PreparedParams::new(&th).step_law(Outcome::One, 2.0);
        assert!((law.loc[0] - 0.090_634_623_461_009_08).abs() < 1e-12);
        assert!((law.scale[0] - 0.286_038_776_773_424_6).abs() < 1e-12);
        let peak = component_log_density(TraderType::Informed, Outcome::One, law.loc[0], 2.0, &th);
        let expect = -(law.scale[0] * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((peak - expect).abs() < 1e-12);
    }

    #[test]
    fn manipulator_inactive_below_threshold() {
        let th = defaults();
        let prep = PreparedParams::new(&th);
        for v in [0.0, 2.0, 5.0] {
            for y in Outcome::BOTH {
                assert_eq!(prep.step_law(y, v).loc[2], 0.0);
            }
        }
        assert!((prep.step_law(Outcome::One, 5.5).loc[2] + 0.3).abs() < 1e-15);
        assert!((prep.step_law(Outcome::Zero, 5.5).loc[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_mixture_is_noise_component() {
        let th = defaults().with_omega([0.0, 1.0, 0.0]);
        for (dx, v) in [(0.1, 2.0), (-1.3, 0.0), (4.0, 8.0)] {
            for y in Outcome::BOTH {
                assert_eq!(
                    mixture_log_density(y, dx, v, &th),
                    component_log_density(TraderType::Noise, y, dx, v, &th)
                );
            }
        }
    }

    #[test]
    fn outcome_symmetry() {
        let th = defaults();
        for v in [0.5, 2.0, 6.0] {
            for dx in [-0.7, -0.1, 0.0, 0.2, 1.4] {
                let a = mixture_log_density(Outcome::One, dx, v, &th);
                let b = mixture_log_density(Outcome::Zero, -dx, v, &th);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_type_is_outcome_free() {
        let th = defaults();
        for dx in [-1.0, 0.0, 0.3] {
            assert_eq!(
                component_log_density(TraderType::Noise, Outcome::One, dx, 1.0, &th),
                component_log_density(TraderType::Noise, Outcome::Zero, dx, 1.0, &th)
            );
        }
    }

    /// Composite Simpson rule, used as an independent normalization oracle.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn mixture_integrates_to_one() {
        let th = defaults();
        let total = simpson(|x| mixture_log_density(Outcome::One, x, 2.0, &th).exp(), -20.0, 20.0, 400_000);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn sampler_mean_for_pure_noise() {
        let th = defaults().with_omega([0.0, 1.0, 0.0]);
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_increment(Outcome::One, 2.0, &th, &mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn sampler_matches_density_ks() {
        // CDF oracle by cumulative trapezoid integration of the density.
        let th = defaults();
        let (lo, hi, n) = (-15.0, 15.0, 300_000);
        let h = (hi - lo) / n as f64;
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        let mut prev = mixture_log_density(Outcome::One, lo, 2.0, &th).exp();
        cdf.push(0.0);
        for i in 1..=n {
            let cur = mixture_log_density(Outcome::One, lo + i as f64 * h, 2.0, &th).exp();
            acc += 0.5 * h * (prev + cur);
            cdf.push(acc);
            prev = cur;
        }
        let mut rng = rng_from_seed(5);
        let m = 100_000;
        let mut xs: Vec<f64> = (0..m).map(|_| sample_increment(Outcome::One, 2.0, &th, &mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let pos = ((x - lo) / h).clamp(0.0, n as f64 - 1.0);
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let f = cdf[j] + frac * (cdf[j + 1] - cdf[j]);
            let lo_e = i as f64 / m as f64;
            let hi_e = (i + 1) as f64 / m as f64;
            ks = ks.max((f - lo_e).abs()).max((hi_e - f).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn sampler_is_deterministic() {
        let th = defaults();
        let draw = |seed| {
            let mut rng = rng_from_seed(seed);
            (0..50).map(|_| sample_increment(Outcome::Zero, 1.5, &th, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn path_likelihood_sums_steps() {
        let th = defaults();
        let empty = IncrementPath { x0: 0.0, dx: vec![] };
        assert_eq!(path_log_likelihood(Outcome::One, &empty, &[], &th).unwrap(), 0.0);

        let one = IncrementPath { x0: 0.0, dx: vec![0.1] };
        assert_eq!(
            path_log_likelihood(Outcome::One, &one, &[2.0], &th).unwrap(),
            mixture_log_density(Outcome::One, 0.1, 2.0, &th)
        );

        let inc = IncrementPath { x0: 0.0, dx: vec![0.1, -0.3, 0.05] };
        let v = [0.4, 2.0, 7.0];
        let brute: f64 = (0..3).map(|t| mixture_log_density(Outcome::Zero, inc.dx[t], v[t], &th)).sum();
        let got = path_log_likelihood(Outcome::Zero, &inc, &v, &th).unwrap();
        assert!((got - brute).abs() < 1e-12);

        assert!(matches!(
            path_log_likelihood(Outcome::Zero, &inc, &v[..2], &th),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn informativeness_examples() {
        let noise = defaults().with_omega([0.0, 1.0, 0.0]);
        for v in [0.0, 3.0, 8.0] {
            assert_eq!(effective_informativeness(v, &noise), 0.0);
        }
        let th = defaults();
        for v in [0.5, 2.0, 5.0] {
            let rho = gate_weights(v, &th);
            let expect = rho[0] * 2.0 * 0.5 * (1.0 - (-0.1 * v).exp());
            let eta = effective_informativeness(v, &th);
            assert!(eta > 0.0);
            assert!((eta - expect).abs() < 1e-14);
        }
        let manip = defaults().with_omega([0.0, 0.0, 1.0]);
        assert!((effective_informativeness(6.0, &manip) + 0.6).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut th = defaults();
        th.tau3 = 1.0;
        th.gamma = [[0.2, 0.5], [-0.1, 0.1], [0.3, 0.3]];
        for (y, x, v) in [(Outcome::One, 0.13, 2.0), (Outcome::Zero, -0.4, 0.7), (Outcome::One, 0.9, 3.5)] {
            let mut grad = ParamGradient::default();
            let val = PreparedParams::new(&th).log_density_with_gradient(y, x, v, &mut grad);
            assert!((val - mixture_log_density(y, x, v, &th)).abs() < 1e-12);
            let h = 1e-6;
            for s in Scalar::ALL {
                if s == Scalar::Tau3 {
                    continue;
                }
                let mut up = th.clone();
                up.set(s, th.get(s) + h);
                let mut dn = th.clone();
                dn.set(s, th.get(s) - h);
                let fd = (mixture_log_density(y, x, v, &up) - mixture_log_density(y, x, v, &dn)) / (2.0 * h);
                let g = grad.scalars[s.index()];
                assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "{} fd={fd} g={g}", s.name());
            }
            for k in 0..3 {
                // omega enters unnormalized, so perturb a single weight.
                let mut up = th.clone();
                up.omega[k] += h;
                let mut dn = th.clone();
                dn.omega[k] -= h;
                let fd = (mixture_log_density(y, x, v, &up) - mixture_log_density(y, x, v, &dn)) / (2.0 * h);
                assert!((fd - grad.omega[k]).abs() < 1e-6, "omega{k}");
            }
        }
    }
}
