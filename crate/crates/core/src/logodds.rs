//! Probability / log-odds coordinates and increment paths.

use crate::error::{Error, Result};

/// `log(p / (1 - p))` for `p` in the open unit interval.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("logit needs 0 < p < 1, got {p}")));
    }
    Ok(p.ln() - (-p).ln_1p())
}

/// Logistic map `1 / (1 + e^{-x})`, branch-stable for large `|x|`.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("sigmoid needs a finite input, got {x}")));
    }
    Ok(logistic(x))
}

/// Unchecked logistic map for internal hot paths.
#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// An observed price-volume history: `T + 1` prices and `T` volumes.
///
/// `v[t - 1]` is the volume traded over `(t - 1, t]`; there is no volume at
/// time zero. Log-odds are kept alongside prices so that simulated paths
/// far out in the tails (where `p` rounds to 0 or 1) keep exact increments.
#[derive(Debug, Clone)]
pub struct History {
    p: Vec<f64>,
    x: Vec<f64>,
    v: Vec<f64>,
}

impl PartialEq for History {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.v == other.v
    }
}

fn check_volumes(p_len: usize, v: &[f64]) -> Result<()> {
    if p_len != v.len() + 1 {
        return Err(Error::LengthMismatch {
            what: "prices vs volumes + 1",
            left: p_len,
            right: v.len() + 1,
        });
    }
    if let Some(bad) = v.iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::domain(format!("volume {bad} is negative or non-finite")));
    }
    Ok(())
}

impl History {
    pub fn new(p: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_volumes(p.len(), &v)?;
        let x = p.iter().map(|&q| logit(q)).collect::<Result<Vec<_>>>()?;
        Ok(Self { p, x, v })
    }

    /// Builds a history from cumulative log-odds `x_0, ..., x_T`.
    pub fn from_log_odds(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_volumes(x.len(), &v)?;
        let p = x.iter().map(|&z| sigmoid(z)).collect::<Result<Vec<_>>>()?;
        Ok(Self { p, x, v })
    }

    pub fn prices(&self) -> &[f64] {
        &self.p
    }

    pub fn log_odds(&self) -> &[f64] {
        &self.x
    }

    pub fn volumes(&self) -> &[f64] {
        &self.v
    }

    pub fn horizon(&self) -> usize {
        self.v.len()
    }

    /// True if every price is strictly inside (0, 1) in floating point.
    pub fn prices_representable(&self) -> bool {
        self.p.iter().all(|&q| q > 0.0 && q < 1.0)
    }

    /// Overwrites `p_0` while keeping `x_0`; used to keep a caller's initial
    /// price bit-identical after a log-odds round trip.
    pub(crate) fn set_initial_price(&mut self, p0: f64) {
        self.p[0] = p0;
    }

    /// The first `t` periods of this history.
    pub fn truncated(&self, t: usize) -> History {
        let t = t.min(self.horizon());
        History {
            p: self.p[..=t].to_vec(),
            x: self.x[..=t].to_vec(),
            v: self.v[..t].to_vec(),
        }
    }
}

/// Initial log-odds plus per-period increments.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPath {
    pub x0: f64,
    pub dx: Vec<f64>,
}

impl IncrementPath {
    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Cumulative log-odds `x_0, ..., x_T`.
    pub fn log_odds(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dx.len() + 1);
        let mut x = self.x0;
        out.push(x);
        for d in &self.dx {
            x += d;
            out.push(x);
        }
        out
    }

    /// Maps cumulative log-odds back to prices.
    pub fn reconstruct(&self) -> Result<Vec<f64>> {
        self.log_odds().into_iter().map(sigmoid).collect()
    }

    /// Builds a history from these increments and a volume path.
    pub fn to_history(&self, volumes: Vec<f64>) -> Result<History> {
        History::from_log_odds(self.log_odds(), volumes)
    }
}

/// `x0 = logit(p_0)` and `dx_t = logit(p_t) - logit(p_{t-1})`.
pub fn to_increments(h: &History) -> Result<IncrementPath> {
    let dx = h.x.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(IncrementPath { x0: h.x[0], dx })
}
