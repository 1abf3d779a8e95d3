//! The three-type latent trader model.
//!
//! Log-odds increments are drawn from a volume-gated mixture of an informed
//! type (Gaussian, drifts toward the outcome), a noise type (Gaussian,
//! outcome-free) and a manipulator type (Student-t, drifts away from the
//! outcome once volume exceeds a threshold). Gating is a softmax over
//! `log(omega_k) + gamma_k0 + gamma_k1 * log(1 + v)`.

mod density;
mod params;

pub use density::{
    component_log_density, effective_informativeness, gate_weights, mixture_log_density,
    path_log_likelihood, sample_increment, ParamGradient, PreparedParams, StepLaw,
};
pub use params::{
    validate_params, Interval, ModelParams, ParamBounds, Scalar, ValidationReport, Violation,
    ViolationKind, SCALAR_COUNT,
};

/// Binary event outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Zero,
    One,
}

impl Outcome {
    pub const BOTH: [Outcome; 2] = [Outcome::One, Outcome::Zero];

    /// `2y - 1`.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Zero => -1.0,
            Outcome::One => 1.0,
        }
    }

    pub fn flip(self) -> Outcome {
        match self {
            Outcome::Zero => Outcome::One,
            Outcome::One => Outcome::Zero,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Outcome::Zero => 0,
            Outcome::One => 1,
        }
    }

    pub fn from_u8(y: u8) -> crate::Result<Self> {
        match y {
            0 => Ok(Outcome::Zero),
            1 => Ok(Outcome::One),
            other => Err(crate::Error::domain(format!("outcome must be 0 or 1, got {other}"))),
        }
    }
}

/// Latent trader type, indexed 1..=3 in the usual notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraderType {
    Informed,
    Noise,
    Manipulator,
}

impl TraderType {
    pub const ALL: [TraderType; 3] = [TraderType::Informed, TraderType::Noise, TraderType::Manipulator];

    pub fn index(self) -> usize {
        match self {
            TraderType::Informed => 0,
            TraderType::Noise => 1,
            TraderType::Manipulator => 2,
        }
    }

    pub fn from_number(k: usize) -> crate::Result<Self> {
        match k {
            1 => Ok(TraderType::Informed),
            2 => Ok(TraderType::Noise),
            3 => Ok(TraderType::Manipulator),
            _ => Err(crate::Error::domain(format!("type index must be 1..=3, got {k}"))),
        }
    }
}
