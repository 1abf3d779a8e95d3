//! Priors, sequential Monte Carlo marginal likelihoods, and outcome
//! posteriors.

mod posterior;
mod prior;
mod reparam;
mod smc;

pub use posterior::{outcome_seed, posterior_from_increments, posterior_summary, sequential_log_bf, PosteriorSummary};
pub use prior::{
    log_prior_density, log_scalar_prior_density, sample_prior, OmegaPrior, PriorSpec, ScalarPrior,
};
pub use reparam::{omega_from_alr, Reparam, ScalarMap};
pub use smc::{
    smc_log_marginal, smc_with_settings, systematic_resample, ParticleEnsemble, SmcSettings,
    StepDiagnostics,
};

pub(crate) use prior::{log_scalar_prior_grad, norm_quantile};
