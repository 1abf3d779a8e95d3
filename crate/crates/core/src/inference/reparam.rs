//! Unconstrained coordinates for the free parameters of a prior.
//!
//! Interval-bounded scalars use a logit-affine map, half-bounded ones a
//! shifted log, and `omega` the additive log-ratio against its third entry.

use super::prior::{OmegaPrior, PriorSpec};
use crate::logodds::{logistic, softplus};
use crate::model::{Interval, ModelParams, Scalar};

/// One scalar coordinate's map `u -> x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMap {
    pub scalar: Scalar,
    pub support: Interval,
}

impl ScalarMap {
    /// `(x, log |dx/du|, dx/du)`.
    #[inline]
    pub fn forward(&self, u: f64) -> (f64, f64, f64) {
        let Interval { lo, hi } = self.support;
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => {
                let w = hi - lo;
                let s = logistic(u);
                let x = (lo + w * s).clamp(lo, hi);
                let log_jac = w.ln() - softplus(-u) - softplus(u);
                (x, log_jac, w * s * (1.0 - s))
            }
            (true, false) => {
                let e = u.exp();
                (lo + e, u, e)
            }
            (false, true) => {
                let e = u.exp();
                (hi - e, u, -e)
            }
            (false, false) => (u, 0.0, 1.0),
        }
    }

    /// d(log |dx/du|)/du.
    #[inline]
    pub fn log_jac_grad(&self, u: f64) -> f64 {
        let Interval { lo, hi } = self.support;
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 1.0 - 2.0 * logistic(u),
            (false, false) => 0.0,
            _ => 1.0,
        }
    }

    pub fn inverse(&self, x: f64) -> f64 {
        let Interval { lo, hi } = self.support;
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => {
                let r = ((x - lo) / (hi - lo)).clamp(1e-15, 1.0 - 1e-15);
                r.ln() - (-r).ln_1p()
            }
            (true, false) => (x - lo).max(1e-300).ln(),
            (false, true) => (hi - x).max(1e-300).ln(),
            (false, false) => x,
        }
    }
}

/// Maps between the free coordinates of a [`PriorSpec`] and [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Reparam {
    maps: Vec<ScalarMap>,
    omega_free: bool,
    base: ModelParams,
}

impl Reparam {
    pub fn new(spec: &PriorSpec) -> Self {
        let mut base = ModelParams::paper_defaults();
        for s in Scalar::ALL {
            if let super::prior::ScalarPrior::Fixed(x) = spec.get(s) {
                base.set(s, x);
            }
        }
        if let OmegaPrior::Fixed(w) = spec.omega {
            base.omega = w;
        }
        let maps = spec
            .free_scalars()
            .into_iter()
            .map(|s| ScalarMap { scalar: s, support: spec.support(s) })
            .collect();
        Self { maps, omega_free: !spec.omega.is_fixed(), base }
    }

    pub fn dim(&self) -> usize {
        self.maps.len() + if self.omega_free { 2 } else { 0 }
    }

    pub fn scalar_maps(&self) -> &[ScalarMap] {
        &self.maps
    }

    pub fn omega_free(&self) -> bool {
        self.omega_free
    }

    /// Parameters with every free coordinate left at its default.
    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    /// Layout: free scalars in [`Scalar::ALL`] order, then the two
    /// log-ratio coordinates of `omega` if it is free.
    pub fn to_unconstrained(&self, theta: &ModelParams) -> Vec<f64> {
        let mut u: Vec<f64> = self.maps.iter().map(|m| m.inverse(theta.get(m.scalar))).collect();
        if self.omega_free {
            let w = theta.omega.map(|x| x.max(1e-300));
            u.push((w[0] / w[2]).ln());
            u.push((w[1] / w[2]).ln());
        }
        u
    }

    /// Parameters and `log |J|` of the inverse map at `u`.
    pub fn to_constrained(&self, u: &[f64]) -> (ModelParams, f64) {
        debug_assert_eq!(u.len(), self.dim());
        let mut theta = self.base.clone();
        let mut log_jac = 0.0;
        for (m, &ui) in self.maps.iter().zip(u) {
            let (x, lj, _) = m.forward(ui);
            theta.set(m.scalar, x);
            log_jac += lj;
        }
        if self.omega_free {
            let k = self.maps.len();
            let (w, lj) = omega_from_alr(u[k], u[k + 1]);
            theta.omega = w;
            log_jac += lj;
        }
        (theta, log_jac)
    }
}

/// Softmax of `(a, b, 0)` and the log-Jacobian `sum_k log w_k`.
pub fn omega_from_alr(a: f64, b: f64) -> ([f64; 3], f64) {
    let m = a.max(b).max(0.0);
    let e = [(a - m).exp(), (b - m).exp(), (-m).exp()];
    let z = e[0] + e[1] + e[2];
    let mut w = e.map(|x| x / z);
    let lz = z.ln() + m;
    let log_jac = (a - lz) + (b - lz) + (0.0 - lz);
    w[2] = 1.0 - w[0] - w[1];
    if w[2] < 0.0 {
        w[2] = 0.0;
    }
    (w, log_jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::prior::sample_prior;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_on_prior_draws() {
        let spec = PriorSpec::default();
        let rp = Reparam::new(&spec);
        assert_eq!(rp.dim(), 14 + 2);
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let th = sample_prior(&spec, &mut rng);
            let (back, lj) = rp.to_constrained(&rp.to_unconstrained(&th));
            assert!(lj.is_finite());
            for s in Scalar::ALL {
                assert!((back.get(s) - th.get(s)).abs() < 1e-9, "{}", s.name());
            }
            for k in 0..3 {
                assert!((back.omega[k] - th.omega[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let m = ScalarMap { scalar: Scalar::Tau3, support: Interval::new(0.0, 10.0) };
        for u in [-3.0, -0.2, 0.0, 1.7] {
            let h = 1e-6;
            let fd = (m.forward(u + h).0 - m.forward(u - h).0) / (2.0 * h);
            assert!((m.forward(u).1 - fd.ln()).abs() < 1e-7);
            assert!((m.forward(u).2 - fd).abs() < 1e-7);
            let gfd = (m.forward(u + h).1 - m.forward(u - h).1) / (2.0 * h);
            assert!((m.log_jac_grad(u) - gfd).abs() < 1e-6);
        }
        // alr: |det d(w1,w2)/d(a,b)| = w1 w2 w3
        let (a, b) = (0.3, -0.8);
        let h = 1e-6;
        let (w, lj) = omega_from_alr(a, b);
        let (wa, _) = omega_from_alr(a + h, b);
        let (wb, _) = omega_from_alr(a, b + h);
        let det = ((wa[0] - w[0]) * (wb[1] - w[1]) - (wa[1] - w[1]) * (wb[0] - w[0])) / (h * h);
        assert!((lj - det.ln()).abs() < 1e-5);
    }

    #[test]
    fn point_mass_has_no_free_coordinates() {
        let th = ModelParams::paper_defaults();
        let rp = Reparam::new(&PriorSpec::point_mass_at(&th));
        assert_eq!(rp.dim(), 0);
        assert_eq!(rp.to_constrained(&[]).0, th);
    }
}
