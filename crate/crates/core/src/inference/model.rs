//! The approximate model
//!
//! ```text
//! Y_j(t) ~ Poisson( exp{g_j(t) + eta_j(t-l) + theta_j(t-l)} + exp{v~_j(t)} )
//! eta_j(t) = alpha0 + X_j(t)' alpha1 + X~_j(t)' alpha2 + A_j(t) delta1 + A~_j(t) delta2
//! g ~ iid Normal(0, tau2),  theta ~ STCAR(sigma2, rho_s, rho_t),
//! v~ ~ iid Normal(mu_v, sigma_v2)
//! ```
//!
//! with Normal(0, 10^2) priors on every regression coefficient and `mu_v`,
//! InvGamma(0.1, 0.1) on the three variances and Uniform(0, 1) on `rho_s`,
//! `rho_t`. When propensity scores are used, the standardized scores `e`,
//! `e^2` and `e*e~` join `X` and `e~`, `e~^2` join `X~`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::graph::IsolatedPolicy;
use crate::panel::PanelDataset;
use crate::propensity::PropensityScores;
use crate::random_fields::StcarStructure;

use super::FitConfig;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const EXP_CLAMP: f64 = 700.0;
pub const PRIOR_COEF_SD: f64 = 10.0;
pub const PRIOR_IG_SHAPE: f64 = 0.1;
pub const PRIOR_IG_RATE: f64 = 0.1;
pub const RHO_MAX: f64 = 1.0 - 1e-6;

/// Which approximation of the infection-rate decomposition is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Full,
    NoNugget,
    #[serde(rename = "no-ps")]
    NoPs,
    NonSpatial,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::Full, Self::NoNugget, Self::NoPs, Self::NonSpatial];

    pub fn has_nugget(self) -> bool {
        matches!(self, Self::Full | Self::NoPs)
    }

    pub fn uses_scores(self) -> bool {
        !matches!(self, Self::NoPs)
    }

    pub fn is_spatial(self) -> bool {
        !matches!(self, Self::NonSpatial)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::NoNugget => "No nugget",
            Self::NoPs => "No PS",
            Self::NonSpatial => "Non-spatial",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoNugget => "no-nugget",
            Self::NoPs => "no-ps",
            Self::NonSpatial => "non-spatial",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant `{s}`")))
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Regressors of `eta_j(t)` for every region and time, in coefficient order
/// `[alpha0 | alpha1 | alpha2 | delta1 | delta2]`.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    pub names: Vec<String>,
    pub n_alpha1: usize,
    pub n_alpha2: usize,
    /// `J*T` rows (index `j + t*J`), `NaN` where a regressor is undefined.
    pub rows: DMatrix<f64>,
}

impl RegressionDesign {
    pub fn n_coefficients(&self) -> usize {
        self.names.len()
    }

    pub fn delta1_index(&self) -> usize {
        1 + self.n_alpha1 + self.n_alpha2
    }

    pub fn build(dataset: &PanelDataset, scores: Option<&PropensityScores>, policy: IsolatedPolicy) -> Result<Self> {
        let (nj, nt) = (dataset.n_regions(), dataset.n_times());
        let a_tilde = dataset.a_tilde(policy)?;
        let x_tilde = dataset.x_tilde(policy)?;

        let mut alpha1: Vec<(String, DMatrix<f64>)> = dataset
            .x_names
            .iter()
            .cloned()
            .zip(dataset.x.iter().cloned())
            .collect();
        let mut alpha2: Vec<(String, DMatrix<f64>)> = dataset
            .x_names
            .iter()
            .map(|n| format!("{n}~"))
            .zip(x_tilde)
            .collect();
        if let Some(sc) = scores {
            if sc.e.shape() != (nj, nt) || sc.e_tilde.shape() != (nj, nt) {
                return Err(Error::Dimension("propensity scores do not match the panel".into()));
            }
            let e = standardize(&sc.e, sc.valid_from)?;
            let et = standardize(&sc.e_tilde, sc.valid_from)?;
            alpha1.push(("e".into(), e.clone()));
            alpha1.push(("e^2".into(), e.map(|v| v * v)));
            alpha1.push(("e*e~".into(), e.component_mul(&et)));
            alpha2.push(("e~".into(), et.clone()));
            alpha2.push(("e~^2".into(), et.map(|v| v * v)));
        }

        let mut names = vec!["alpha0".to_string()];
        names.extend(alpha1.iter().map(|(n, _)| format!("alpha1.{n}")));
        names.extend(alpha2.iter().map(|(n, _)| format!("alpha2.{n}")));
        names.push("delta1".into());
        names.push("delta2".into());

        let mut cols: Vec<&DMatrix<f64>> = Vec::new();
        cols.extend(alpha1.iter().map(|(_, m)| m));
        cols.extend(alpha2.iter().map(|(_, m)| m));
        cols.push(&dataset.a);
        cols.push(&a_tilde);
        let p = names.len();
        let rows = DMatrix::from_fn(nj * nt, p, |r, c| {
            if c == 0 {
                1.0
            } else {
                let (j, t) = (r % nj, r / nj);
                cols[c - 1][(j, t)]
            }
        });
        Ok(Self {
            names,
            n_alpha1: alpha1.len(),
            n_alpha2: alpha2.len(),
            rows,
        })
    }
}

/// Centers and scales the score over its defined cells.
fn standardize(m: &DMatrix<f64>, valid_from: usize) -> Result<DMatrix<f64>> {
    let vals: Vec<f64> = (valid_from..m.ncols())
        .flat_map(|t| m.column(t).iter().copied().collect::<Vec<_>>())
        .collect();
    if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("propensity scores are not finite on their valid range".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    Ok(m.map(|v| (v - mean) / sd))
}

/// Every parameter and latent field of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha0: f64,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub delta1: f64,
    pub delta2: f64,
    pub sigma2: f64,
    pub tau2: f64,
    pub sigma_v2: f64,
    pub mu_v: f64,
    pub rho_s: f64,
    pub rho_t: f64,
    /// J x T, all times.
    pub theta: DMatrix<f64>,
    /// J x T; only fit-window columns enter the model.
    pub g: DMatrix<f64>,
    /// J x T; only fit-window columns enter the model, unused without a nugget.
    pub v_tilde: DMatrix<f64>,
}

impl ModelParams {
    pub fn coefficients(&self) -> Vec<f64> {
        let mut b = vec![self.alpha0];
        b.extend(&self.alpha1);
        b.extend(&self.alpha2);
        b.push(self.delta1);
        b.push(self.delta2);
        b
    }

    pub fn set_coefficients(&mut self, b: &[f64], n_alpha1: usize, n_alpha2: usize) {
        self.alpha0 = b[0];
        self.alpha1 = b[1..1 + n_alpha1].to_vec();
        self.alpha2 = b[1 + n_alpha1..1 + n_alpha1 + n_alpha2].to_vec();
        self.delta1 = b[1 + n_alpha1 + n_alpha2];
        self.delta2 = b[2 + n_alpha1 + n_alpha2];
    }
}

/// Observation-level view of one fit: which counts enter, and the
/// regressors they see after lagging.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub variant: ModelVariant,
    pub lag: usize,
    pub window_start: usize,
    pub n_regions: usize,
    pub n_times: usize,
    pub design: RegressionDesign,
    pub structure: StcarStructure,
    /// Counts of the window, observation-major (time, then region).
    pub y: Vec<f64>,
    pub ln_y_factorial: Vec<f64>,
    /// `(j, t)` of each observation; the latent index is `(j, t - lag)`.
    pub cells: Vec<(usize, usize)>,
    /// Row-major `n_obs x p` regressors at `t - lag`.
    pub z: Vec<f64>,
}

impl FitProblem {
    pub fn new(
        dataset: &PanelDataset,
        scores: Option<&PropensityScores>,
        variant: ModelVariant,
        lag: usize,
        window_start: usize,
        policy: IsolatedPolicy,
    ) -> Result<Self> {
        dataset.validate()?;
        let (nj, nt) = (dataset.n_regions(), dataset.n_times());
        if window_start >= nt {
            return invalid(format!("fit window starts at {window_start} but the panel has {nt} times"));
        }
        if window_start < lag {
            return invalid(format!("fit window start {window_start} precedes the lag {lag}"));
        }
        let used_scores = if variant.uses_scores() {
            let sc = scores.ok_or_else(|| {
                Error::InvalidArgument(format!("variant {variant} needs propensity scores"))
            })?;
            if window_start < lag + sc.valid_from {
                return invalid(format!(
                    "fit window start {window_start} must be at least lag {lag} + propensity valid-from {}",
                    sc.valid_from
                ));
            }
            Some(sc)
        } else {
            None
        };
        let design = RegressionDesign::build(dataset, used_scores, policy)?;
        let structure = StcarStructure::new(&dataset.graph, nt, policy, false)?;
        let p = design.n_coefficients();
        let mut y = Vec::new();
        let mut ln_y_factorial = Vec::new();
        let mut cells = Vec::new();
        let mut z = Vec::new();
        for t in window_start..nt {
            for j in 0..nj {
                let count = dataset.y[(j, t)] as f64;
                y.push(count);
                ln_y_factorial.push(ln_gamma(count + 1.0));
                cells.push((j, t));
                let row = j + (t - lag) * nj;
                for c in 0..p {
                    let v = design.rows[(row, c)];
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "regressor {} undefined at region {j}, time {}",
                            design.names[c],
                            t - lag
                        )));
                    }
                    z.push(v);
                }
            }
        }
        Ok(Self {
            variant,
            lag,
            window_start,
            n_regions: nj,
            n_times: nt,
            design,
            structure,
            y,
            ln_y_factorial,
            cells,
            z,
        })
    }

    pub fn from_config(
        dataset: &PanelDataset,
        scores: Option<&PropensityScores>,
        variant: ModelVariant,
        config: &FitConfig,
    ) -> Result<Self> {
        Self::new(dataset, scores, variant, config.lag, config.window_start, config.isolated_policy)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.n_coefficients()
    }

    pub fn z_row(&self, o: usize) -> &[f64] {
        let p = self.n_coefficients();
        &self.z[o * p..(o + 1) * p]
    }

    pub fn eta(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n_obs())
            .map(|o| self.z_row(o).iter().zip(b).map(|(z, b)| z * b).sum())
            .collect()
    }

    /// Zero-filled parameters with the right shapes for this problem.
    pub fn blank_params(&self) -> ModelParams {
        let z = DMatrix::zeros(self.n_regions, self.n_times);
        ModelParams {
            alpha0: 0.0,
            alpha1: vec![0.0; self.design.n_alpha1],
            alpha2: vec![0.0; self.design.n_alpha2],
            delta1: 0.0,
            delta2: 0.0,
            sigma2: 1.0,
            tau2: 1.0,
            sigma_v2: 1.0,
            mu_v: 0.0,
            rho_s: if self.variant.is_spatial() { 0.5 } else { 0.0 },
            rho_t: 0.5,
            theta: z.clone(),
            g: z.clone(),
            v_tilde: z,
        }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let shape = (self.n_regions, self.n_times);
        if params.alpha1.len() != self.design.n_alpha1
            || params.alpha2.len() != self.design.n_alpha2
            || params.theta.shape() != shape
            || params.g.shape() != shape
            || params.v_tilde.shape() != shape
        {
            return Err(Error::Dimension("parameters do not match the fit problem".into()));
        }
        Ok(())
    }

    /// Poisson log likelihood over the fit window and the number of rate
    /// exponents that had to be clamped to `±700`.
    pub fn log_likelihood_with_clamps(&self, params: &ModelParams) -> Result<(f64, usize)> {
        self.check_params(params)?;
        let eta = self.eta(&params.coefficients());
        let nugget = self.variant.has_nugget();
        let mut ll = 0.0;
        let mut clamps = 0;
        for (o, &(j, t)) in self.cells.iter().enumerate() {
            let s = t - self.lag;
            let (lin, c1) = clamp_exponent(params.g[(j, t)] + eta[o] + params.theta[(j, s)]);
            let y = self.y[o];
            let term = if nugget {
                let (lv, c2) = clamp_exponent(params.v_tilde[(j, t)]);
                clamps += c2 as usize;
                let mu = lin.exp() + lv.exp();
                y * mu.ln() - mu
            } else {
                y * lin - lin.exp()
            };
            clamps += c1 as usize;
            ll += term - self.ln_y_factorial[o];
        }
        Ok((ll, clamps))
    }

    pub fn log_likelihood(&self, params: &ModelParams) -> Result<f64> {
        self.log_likelihood_with_clamps(params).map(|(ll, _)| ll)
    }

    /// Log prior density including the latent-field densities of `theta`,
    /// `g` and (with a nugget) `v~`; `-inf` outside the support.
    pub fn log_prior(&self, params: &ModelParams) -> Result<f64> {
        self.check_params(params)?;
        let nugget = self.variant.has_nugget();
        let in_unit = |r: f64| r > 0.0 && r <= RHO_MAX;
        let rho_ok = in_unit(params.rho_t)
            && if self.variant.is_spatial() { in_unit(params.rho_s) } else { params.rho_s == 0.0 };
        let var_ok = params.sigma2 > 0.0 && params.tau2 > 0.0 && (!nugget || params.sigma_v2 > 0.0);
        if !rho_ok || !var_ok {
            return Ok(f64::NEG_INFINITY);
        }
        let mut lp: f64 = params.coefficients().iter().map(|&b| normal_ln_pdf(b, 0.0, PRIOR_COEF_SD * PRIOR_COEF_SD)).sum();
        lp += inv_gamma_ln_pdf(params.sigma2, PRIOR_IG_SHAPE, PRIOR_IG_RATE);
        lp += inv_gamma_ln_pdf(params.tau2, PRIOR_IG_SHAPE, PRIOR_IG_RATE);
        if nugget {
            lp += normal_ln_pdf(params.mu_v, 0.0, PRIOR_COEF_SD * PRIOR_COEF_SD);
            lp += inv_gamma_ln_pdf(params.sigma_v2, PRIOR_IG_SHAPE, PRIOR_IG_RATE);
        }
        lp += stcar_ln_pdf(&self.structure, &params.theta, params.sigma2, params.rho_s, params.rho_t);
        for &(j, t) in &self.cells {
            lp += normal_ln_pdf(params.g[(j, t)], 0.0, params.tau2);
            if nugget {
                lp += normal_ln_pdf(params.v_tilde[(j, t)], params.mu_v, params.sigma_v2);
            }
        }
        Ok(lp)
    }

    pub fn log_posterior(&self, params: &ModelParams) -> Result<f64> {
        let lp = self.log_prior(params)?;
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(lp + self.log_likelihood(params)?)
    }
}

pub(crate) fn clamp_exponent(x: f64) -> (f64, bool) {
    if x > EXP_CLAMP {
        (EXP_CLAMP, true)
    } else if x < -EXP_CLAMP {
        (-EXP_CLAMP, true)
    } else {
        (x, false)
    }
}

pub(crate) fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean).powi(2) / var
}

pub fn inv_gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// STCAR density with variance parameter `sigma2`.
pub(crate) fn stcar_ln_pdf(s: &StcarStructure, theta: &DMatrix<f64>, sigma2: f64, rho_s: f64, rho_t: f64) -> f64 {
    let n = theta.len() as f64;
    let log_det = s.log_det_kron(rho_s, rho_t) - n * sigma2.ln();
    let quad = s.quad_form(theta, rho_s, rho_t) / sigma2;
    -0.5 * n * LN_2PI + 0.5 * log_det - 0.5 * quad
}

/// Poisson log likelihood of `Y` given the model parameters.
pub fn log_likelihood(
    params: &ModelParams,
    dataset: &PanelDataset,
    scores: Option<&PropensityScores>,
    variant: ModelVariant,
    lag: usize,
    window_start: usize,
) -> Result<f64> {
    FitProblem::new(dataset, scores, variant, lag, window_start, IsolatedPolicy::Error)?.log_likelihood(params)
}

/// Log prior (including latent-field densities) for `variant`.
pub fn log_prior(
    params: &ModelParams,
    dataset: &PanelDataset,
    scores: Option<&PropensityScores>,
    variant: ModelVariant,
    lag: usize,
    window_start: usize,
) -> Result<f64> {
    FitProblem::new(dataset, scores, variant, lag, window_start, IsolatedPolicy::Error)?.log_prior(params)
}
