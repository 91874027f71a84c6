//! Bayesian fit of the approximate infection-rate model by
//! Metropolis-within-Gibbs.

mod model;
mod sampler;
mod samples;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::IsolatedPolicy;

pub use model::{
    inv_gamma_ln_pdf, log_likelihood, log_prior, FitProblem, ModelParams, ModelVariant, RegressionDesign, EXP_CLAMP,
    PRIOR_COEF_SD, PRIOR_IG_RATE, PRIOR_IG_SHAPE, RHO_MAX,
};
pub use sampler::{fit, fit_problem, fit_problem_from};
pub use samples::{LatentDraw, PosteriorSamples, RunManifest};

/// MCMC settings. Time indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Thinning of stored latent fields; 0 disables storage.
    pub latent_thin: usize,
    pub lag: usize,
    /// First time index whose count enters the likelihood.
    pub window_start: usize,
    /// Random-walk moves of the regression block per iteration.
    pub regression_steps: usize,
    /// Initial logit-scale random-walk step for `rho_s`, `rho_t`.
    pub rho_step: f64,
    /// Largest Newton step of a single-site latent proposal.
    pub max_site_step: f64,
    pub adapt: bool,
    pub adapt_batch: usize,
    pub target_accept_regression: f64,
    pub target_accept_rho: f64,
    pub isolated_policy: IsolatedPolicy,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 2_000,
            thin: 1,
            latent_thin: 50,
            lag: 2,
            window_start: 4,
            regression_steps: 4,
            rho_step: 0.5,
            max_site_step: 2.0,
            adapt: true,
            adapt_batch: 50,
            target_accept_regression: 0.234,
            target_accept_rho: 0.44,
            isolated_policy: IsolatedPolicy::Error,
            seed: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return invalid(format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations));
        }
        if self.thin == 0 {
            return invalid("thin must be at least 1");
        }
        if self.regression_steps == 0 || self.adapt_batch == 0 {
            return invalid("regression_steps and adapt_batch must be positive");
        }
        if !(self.rho_step > 0.0) || !(self.max_site_step > 0.0) {
            return invalid("proposal steps must be positive");
        }
        for t in [self.target_accept_regression, self.target_accept_rho] {
            if !(t > 0.0 && t < 1.0) {
                return invalid("target acceptance rates must lie in (0, 1)");
            }
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}
