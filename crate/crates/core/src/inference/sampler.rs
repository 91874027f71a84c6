use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::propensity::PropensityScores;

use super::model::{clamp_exponent, FitProblem, ModelParams, ModelVariant, PRIOR_COEF_SD, PRIOR_IG_RATE, PRIOR_IG_SHAPE, RHO_MAX};
use super::samples::{LatentDraw, PosteriorSamples, RunManifest};
use super::FitConfig;

const NUGGET_SHIFT_STEPS: usize = 3;
const MAX_INIT_ATTEMPTS: usize = 10;
const RHO_MIN: f64 = 1e-9;

/// Runs the sampler for `variant` on `dataset`. `scores` may be `None` only
/// for the variant without propensity scores.
pub fn fit(
    dataset: &PanelDataset,
    scores: Option<&PropensityScores>,
    variant: ModelVariant,
    config: &FitConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let problem = FitProblem::from_config(dataset, scores, variant, config)?;
    fit_problem(&problem, config)
}

pub fn fit_problem(problem: &FitProblem, config: &FitConfig) -> Result<PosteriorSamples> {
    fit_problem_from(problem, config, None)
}

/// Like [`fit_problem`], starting from `init` when given.
pub fn fit_problem_from(problem: &FitProblem, config: &FitConfig, init: Option<&ModelParams>) -> Result<PosteriorSamples> {
    config.validate()?;
    if problem.lag != config.lag || problem.window_start != config.window_start {
        return Err(Error::InvalidArgument("fit problem and config disagree on lag or window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut chain, attempts) = Chain::initialize(problem, config, init, &mut rng)?;
    chain.run(&mut rng, attempts)
}

/// Single-site log target in `x` where the Poisson rate is
/// `exp(off + x) + add` and `x` has a Normal(`mean`, 1/`prec`) prior.
struct Site {
    y: f64,
    off: f64,
    add: f64,
    mean: f64,
    prec: f64,
}

impl Site {
    /// Log target, gradient, Fisher information and whether the exponent clamped.
    fn eval(&self, x: f64) -> (f64, f64, f64, bool) {
        let (lin, clamped) = clamp_exponent(self.off + x);
        let mx = lin.exp();
        let dx = x - self.mean;
        let prior = -0.5 * self.prec * dx * dx;
        if self.add == 0.0 {
            let f = self.y * lin - mx + prior;
            (f, self.y - mx - self.prec * dx, mx + self.prec, clamped)
        } else {
            let mu = mx + self.add;
            let f = self.y * mu.ln() - mu + prior;
            let grad = (self.y / mu - 1.0) * mx - self.prec * dx;
            (f, grad, mx * mx / mu + self.prec, clamped)
        }
    }
}

/// One Metropolis-Hastings move with a damped Newton Gaussian proposal.
fn newton_move<R: Rng + ?Sized>(site: &Site, x: f64, max_step: f64, rng: &mut R, clamped: &mut bool) -> (f64, bool) {
    let (f0, g0, w0, c0) = site.eval(x);
    let m0 = x + (g0 / w0).clamp(-max_step, max_step);
    let z: f64 = rng.sample(StandardNormal);
    let x1 = m0 + z / w0.sqrt();
    let (f1, g1, w1, c1) = site.eval(x1);
    let m1 = x1 + (g1 / w1).clamp(-max_step, max_step);
    let q_fwd = 0.5 * w0.ln() - 0.5 * w0 * (x1 - m0).powi(2);
    let q_rev = 0.5 * w1.ln() - 0.5 * w1 * (x - m1).powi(2);
    let log_ratio = f1 - f0 + q_rev - q_fwd;
    let u: f64 = rng.random();
    if log_ratio.is_finite() && u.ln() < log_ratio {
        *clamped |= c1;
        (x1, true)
    } else {
        *clamped |= c0;
        (x, false)
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    tried: u64,
    accepted: u64,
}

impl Tally {
    fn record(&mut self, accepted: bool) {
        self.tried += 1;
        self.accepted += accepted as u64;
    }

    fn rate(&self) -> f64 {
        if self.tried == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

struct Chain<'a> {
    p: &'a FitProblem,
    cfg: &'a FitConfig,
    nj: usize,
    nt: usize,
    nugget: bool,
    spatial: bool,
    obs_site: Vec<usize>,
    site_obs: Vec<Option<usize>>,
    shift_dirs: Vec<Vec<f64>>,
    b: Vec<f64>,
    eta: Vec<f64>,
    theta: Vec<f64>,
    g: Vec<f64>,
    vt: Vec<f64>,
    sigma2: f64,
    tau2: f64,
    sigma_v2: f64,
    mu_v: f64,
    rho_s: f64,
    rho_t: f64,
    chol: DMatrix<f64>,
    log_scale: f64,
    log_step_s: f64,
    log_step_t: f64,
    log_step_v: f64,
    clamped: bool,
}

impl<'a> Chain<'a> {
    fn initialize<R: Rng + ?Sized>(
        p: &'a FitProblem,
        cfg: &'a FitConfig,
        init: Option<&ModelParams>,
        rng: &mut R,
    ) -> Result<(Self, usize)> {
        let (nj, nt) = (p.n_regions, p.n_times);
        let obs_site: Vec<usize> = p.cells.iter().map(|&(j, t)| j + (t - p.lag) * nj).collect();
        let mut site_obs = vec![None; nj * nt];
        for (o, &s) in obs_site.iter().enumerate() {
            site_obs[s] = Some(o);
        }
        let (b_glm, fisher) = poisson_glm(p);
        let np = b_glm.len();
        let cov = fisher
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::from_diagonal(&fisher.diagonal().map(|d| 1.0 / d.max(1e-12))));
        let shape = cov * (2.38 * 2.38 / np as f64);
        let chol = cholesky_or_diag(&shape);

        let mean_y = p.y.iter().sum::<f64>() / p.n_obs() as f64;
        let vt0 = (0.1 * mean_y + 1e-3).ln();
        let nugget = p.variant.has_nugget();
        let spatial = p.variant.is_spatial();
        let mut chain = Chain {
            p,
            cfg,
            nj,
            nt,
            nugget,
            spatial,
            obs_site,
            site_obs,
            shift_dirs: (0..np)
                .map(|c| (0..nj * nt).map(|r| p.design.rows[(r, c)]).map(|v| if v.is_finite() { v } else { 0.0 }).collect())
                .collect(),
            b: b_glm.clone(),
            eta: Vec::new(),
            theta: vec![0.0; nj * nt],
            g: vec![0.0; p.n_obs()],
            vt: vec![if nugget { vt0 } else { f64::NEG_INFINITY }; p.n_obs()],
            sigma2: 0.1,
            tau2: 0.1,
            sigma_v2: 0.1,
            mu_v: vt0,
            rho_s: if spatial { 0.5 } else { 0.0 },
            rho_t: 0.5,
            chol,
            log_scale: 0.0,
            log_step_s: cfg.rho_step.ln(),
            log_step_t: cfg.rho_step.ln(),
            log_step_v: cfg.rho_step.ln(),
            clamped: false,
        };
        if let Some(init) = init {
            chain.load(init)?;
        }
        for attempt in 0..MAX_INIT_ATTEMPTS {
            if attempt > 0 {
                let shrink = 0.5f64.powi(attempt as i32);
                chain.b = b_glm
                    .iter()
                    .map(|&b| b * shrink + 0.01 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                chain.theta.fill(0.0);
                chain.g.fill(0.0);
            }
            chain.eta = p.eta(&chain.b);
            let lp = p.log_posterior(&chain.params())?;
            if lp.is_finite() {
                return Ok((chain, attempt + 1));
            }
            warn!("non-finite log posterior at initialization attempt {}", attempt + 1);
        }
        Err(Error::NonFiniteInit { attempts: MAX_INIT_ATTEMPTS })
    }

    fn load(&mut self, init: &ModelParams) -> Result<()> {
        let b = init.coefficients();
        if b.len() != self.b.len() || init.theta.shape() != (self.nj, self.nt) {
            return Err(Error::Dimension("initial parameters do not match the fit problem".into()));
        }
        self.b = b;
        self.theta.copy_from_slice(init.theta.as_slice());
        for (o, &(j, t)) in self.p.cells.iter().enumerate() {
            self.g[o] = init.g[(j, t)];
            if self.nugget {
                self.vt[o] = init.v_tilde[(j, t)];
            }
        }
        self.sigma2 = init.sigma2;
        self.tau2 = init.tau2;
        if self.nugget {
            self.sigma_v2 = init.sigma_v2;
            self.mu_v = init.mu_v;
        }
        self.rho_s = if self.spatial { init.rho_s } else { 0.0 };
        self.rho_t = init.rho_t;
        Ok(())
    }

    fn params(&self) -> ModelParams {
        let mut out = self.p.blank_params();
        out.set_coefficients(&self.b, self.p.design.n_alpha1, self.p.design.n_alpha2);
        out.theta = DMatrix::from_column_slice(self.nj, self.nt, &self.theta);
        out.v_tilde.fill(f64::NEG_INFINITY);
        for (o, &(j, t)) in self.p.cells.iter().enumerate() {
            out.g[(j, t)] = self.g[o];
            out.v_tilde[(j, t)] = self.vt[o];
        }
        out.sigma2 = self.sigma2;
        out.tau2 = self.tau2;
        out.sigma_v2 = if self.nugget { self.sigma_v2 } else { f64::NAN };
        out.mu_v = if self.nugget { self.mu_v } else { f64::NAN };
        out.rho_s = self.rho_s;
        out.rho_t = self.rho_t;
        out
    }

    fn nugget_rate(&self, o: usize) -> f64 {
        if self.nugget {
            clamp_exponent(self.vt[o]).0.exp()
        } else {
            0.0
        }
    }

    fn regression_block<R: Rng + ?Sized>(&mut self, rng: &mut R, tally: &mut Tally) {
        let p = self.p;
        let n = p.n_obs();
        let np = self.b.len();
        let base: Vec<f64> = (0..n).map(|o| self.g[o] + self.theta[self.obs_site[o]]).collect();
        let add: Vec<f64> = (0..n).map(|o| self.nugget_rate(o)).collect();
        let loglik = |eta: &[f64], clamped: &mut bool| -> f64 {
            let mut ll = 0.0;
            for o in 0..n {
                let (lin, c) = clamp_exponent(base[o] + eta[o]);
                *clamped |= c;
                ll += if add[o] == 0.0 {
                    p.y[o] * lin - lin.exp()
                } else {
                    let mu = lin.exp() + add[o];
                    p.y[o] * mu.ln() - mu
                };
            }
            ll
        };
        let prior = |b: &[f64]| -> f64 { -0.5 * b.iter().map(|v| v * v).sum::<f64>() / (PRIOR_COEF_SD * PRIOR_COEF_SD) };
        let mut scratch = false;
        let mut cur = loglik(&self.eta, &mut scratch) + prior(&self.b);
        let scale = self.log_scale.exp();
        let mut eta_new = vec![0.0; n];
        for _ in 0..self.cfg.regression_steps {
            let z = DVector::from_fn(np, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &self.chol * z * scale;
            let b_new: Vec<f64> = self.b.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
            for (o, e) in eta_new.iter_mut().enumerate() {
                *e = p.z_row(o).iter().zip(&b_new).map(|(z, b)| z * b).sum();
            }
            let mut clamped = false;
            let prop = loglik(&eta_new, &mut clamped) + prior(&b_new);
            let u: f64 = rng.random();
            let accept = prop.is_finite() && u.ln() < prop - cur;
            if accept {
                self.b = b_new;
                std::mem::swap(&mut self.eta, &mut eta_new);
                cur = prop;
                self.clamped |= clamped;
            }
            tally.record(accept);
        }
    }

    /// Conditional prior mean and unscaled precision of `theta` at site (j, s).
    fn theta_conditional(&self, j: usize, s: usize) -> (f64, f64) {
        let st = self.p.structure.space();
        let tm = self.p.structure.time();
        let ms = self.p.structure.space_degrees()[j];
        let mt = self.p.structure.time_degrees()[s];
        let nj = self.nj;
        let th = &self.theta;
        let space_sum: f64 = st.neighbors(j).iter().map(|&k| th[k + s * nj]).sum();
        let mut time_sum = 0.0;
        let mut cross = 0.0;
        for &u in tm.neighbors(s) {
            time_sum += th[j + u * nj];
            cross += st.neighbors(j).iter().map(|&k| th[k + u * nj]).sum::<f64>();
        }
        let q = ms * mt;
        let mean = (self.rho_s * mt * space_sum + self.rho_t * ms * time_sum - self.rho_s * self.rho_t * cross) / q;
        (mean, q)
    }

    fn theta_sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, tally: &mut Tally) {
        for s in 0..self.nt {
            for j in 0..self.nj {
                let i = j + s * self.nj;
                let (mean, q) = self.theta_conditional(j, s);
                let prec = q / self.sigma2;
                match self.site_obs[i] {
                    Some(o) => {
                        let site = Site {
                            y: self.p.y[o],
                            off: self.g[o] + self.eta[o],
                            add: self.nugget_rate(o),
                            mean,
                            prec,
                        };
                        let (x, acc) = newton_move(&site, self.theta[i], self.cfg.max_site_step, rng, &mut self.clamped);
                        self.theta[i] = x;
                        tally.record(acc);
                    }
                    None => {
                        let z: f64 = rng.sample(StandardNormal);
                        self.theta[i] = mean + z / prec.sqrt();
                    }
                }
            }
        }
    }

    /// `Q x` for the unscaled space-time precision at the current `rho`.
    fn precision_mul(&self, x: &[f64]) -> Vec<f64> {
        let st = self.p.structure.space();
        let tm = self.p.structure.time();
        let sd = self.p.structure.space_degrees();
        let td = self.p.structure.time_degrees();
        let nj = self.nj;
        let mut out = vec![0.0; x.len()];
        for s in 0..self.nt {
            for j in 0..nj {
                let space_sum: f64 = st.neighbors(j).iter().map(|&k| x[k + s * nj]).sum();
                let mut time_sum = 0.0;
                let mut cross = 0.0;
                for &u in tm.neighbors(s) {
                    time_sum += x[j + u * nj];
                    cross += st.neighbors(j).iter().map(|&k| x[k + u * nj]).sum::<f64>();
                }
                out[j + s * nj] = sd[j] * td[s] * x[j + s * nj]
                    - self.rho_s * td[s] * space_sum
                    - self.rho_t * sd[j] * time_sum
                    + self.rho_s * self.rho_t * cross;
            }
        }
        out
    }

    /// Exact Gibbs draw along `(theta + V c, b - c)`, which leaves every rate unchanged.
    fn coefficient_shift<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let np = self.b.len();
        let qv: Vec<Vec<f64>> = self.shift_dirs.iter().map(|v| self.precision_mul(v)).collect();
        let qt = self.precision_mul(&self.theta);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let prior_prec = 1.0 / (PRIOR_COEF_SD * PRIOR_COEF_SD);
        let mut prec = DMatrix::<f64>::zeros(np, np);
        let mut h = DVector::<f64>::zeros(np);
        for a in 0..np {
            for c in 0..=a {
                let v = dot(&self.shift_dirs[a], &qv[c]) / self.sigma2;
                prec[(a, c)] = v;
                prec[(c, a)] = v;
            }
            prec[(a, a)] += prior_prec;
            h[a] = self.b[a] * prior_prec - dot(&self.shift_dirs[a], &qt) / self.sigma2;
        }
        let Some(chol) = prec.cholesky() else { return };
        let mean = chol.solve(&h);
        let z = DVector::<f64>::from_fn(np, |_, _| rng.sample(StandardNormal));
        let dev = chol.l().transpose().solve_upper_triangular(&z).unwrap_or_else(|| DVector::zeros(np));
        let c = mean + dev;
        if c.iter().any(|v| !v.is_finite()) {
            return;
        }
        for (k, v) in self.shift_dirs.iter().enumerate() {
            for (t, x) in self.theta.iter_mut().zip(v) {
                *t += c[k] * x;
            }
            self.b[k] -= c[k];
        }
        for o in 0..self.eta.len() {
            self.eta[o] -= self.p.z_row(o).iter().zip(c.iter()).map(|(z, c)| z * c).sum::<f64>();
        }
    }

    /// Random-walk move along `(v_tilde + c, mu_v + c)`.
    fn nugget_shift<R: Rng + ?Sized>(&mut self, rng: &mut R, tally: &mut Tally) {
        let mut clamped = false;
        let signal: Vec<f64> = (0..self.p.n_obs())
            .map(|o| {
                let (lin, c) = clamp_exponent(self.g[o] + self.eta[o] + self.theta[self.obs_site[o]]);
                clamped |= c;
                lin.exp()
            })
            .collect();
        self.clamped |= clamped;
        let y = &self.p.y;
        let loglik = |vt: &[f64], shift: f64, clamped: &mut bool| -> f64 {
            let mut total = 0.0;
            for (o, &sig) in signal.iter().enumerate() {
                let (v, c) = clamp_exponent(vt[o] + shift);
                *clamped |= c;
                let rate = sig + v.exp();
                total += y[o] * rate.ln() - rate;
            }
            total
        };
        let prior_var = PRIOR_COEF_SD * PRIOR_COEF_SD;
        for _ in 0..NUGGET_SHIFT_STEPS {
            let z: f64 = rng.sample(StandardNormal);
            let c = z * self.log_step_v.exp();
            let mut clamped = false;
            let ratio = loglik(&self.vt, c, &mut clamped) - loglik(&self.vt, 0.0, &mut clamped)
                - ((self.mu_v + c).powi(2) - self.mu_v.powi(2)) / (2.0 * prior_var);
            let u: f64 = rng.random();
            let accept = ratio.is_finite() && u.ln() < ratio;
            if accept {
                for v in &mut self.vt {
                    *v += c;
                }
                self.mu_v += c;
                self.clamped |= clamped;
            }
            tally.record(accept);
        }
    }

    fn g_sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, tally: &mut Tally) {
        for o in 0..self.p.n_obs() {
            let site = Site {
                y: self.p.y[o],
                off: self.eta[o] + self.theta[self.obs_site[o]],
                add: self.nugget_rate(o),
                mean: 0.0,
                prec: 1.0 / self.tau2,
            };
            let (x, acc) = newton_move(&site, self.g[o], self.cfg.max_site_step, rng, &mut self.clamped);
            self.g[o] = x;
            tally.record(acc);
        }
    }

    fn v_sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, tally: &mut Tally) {
        for o in 0..self.p.n_obs() {
            let (lin, c) = clamp_exponent(self.g[o] + self.eta[o] + self.theta[self.obs_site[o]]);
            self.clamped |= c;
            let site = Site {
                y: self.p.y[o],
                off: 0.0,
                add: lin.exp(),
                mean: self.mu_v,
                prec: 1.0 / self.sigma_v2,
            };
            let (x, acc) = newton_move(&site, self.vt[o], self.cfg.max_site_step, rng, &mut self.clamped);
            self.vt[o] = x;
            tally.record(acc);
        }
    }

    fn variance_updates<R: Rng + ?Sized>(&mut self, rng: &mut R, quad: &[f64; 4]) -> Result<()> {
        let q = quad[0] - self.rho_s * quad[1] - self.rho_t * quad[2] + self.rho_s * self.rho_t * quad[3];
        self.sigma2 = inv_gamma_draw(rng, PRIOR_IG_SHAPE + 0.5 * self.theta.len() as f64, PRIOR_IG_RATE + 0.5 * q)?;
        let n = self.p.n_obs() as f64;
        let ss_g: f64 = self.g.iter().map(|v| v * v).sum();
        self.tau2 = inv_gamma_draw(rng, PRIOR_IG_SHAPE + 0.5 * n, PRIOR_IG_RATE + 0.5 * ss_g)?;
        if self.nugget {
            let ss_v: f64 = self.vt.iter().map(|v| (v - self.mu_v).powi(2)).sum();
            self.sigma_v2 = inv_gamma_draw(rng, PRIOR_IG_SHAPE + 0.5 * n, PRIOR_IG_RATE + 0.5 * ss_v)?;
            let prec = 1.0 / (PRIOR_COEF_SD * PRIOR_COEF_SD) + n / self.sigma_v2;
            let mean = self.vt.iter().sum::<f64>() / self.sigma_v2 / prec;
            let z: f64 = rng.sample(StandardNormal);
            self.mu_v = mean + z / prec.sqrt();
        }
        Ok(())
    }

    fn rho_target(&self, rho_s: f64, rho_t: f64, quad: &[f64; 4]) -> f64 {
        let q = quad[0] - rho_s * quad[1] - rho_t * quad[2] + rho_s * rho_t * quad[3];
        0.5 * self.p.structure.log_det_kron(rho_s, rho_t) - 0.5 * q / self.sigma2
    }

    fn rho_move<R: Rng + ?Sized>(&mut self, rng: &mut R, quad: &[f64; 4], spatial: bool) -> bool {
        let (cur, log_step) = if spatial { (self.rho_s, self.log_step_s) } else { (self.rho_t, self.log_step_t) };
        let z: f64 = rng.sample(StandardNormal);
        let logit = (cur / (1.0 - cur)).ln() + log_step.exp() * z;
        let prop = 1.0 / (1.0 + (-logit).exp());
        let u: f64 = rng.random();
        if !(RHO_MIN..=RHO_MAX).contains(&prop) {
            return false;
        }
        let (f0, f1) = if spatial {
            (self.rho_target(cur, self.rho_t, quad), self.rho_target(prop, self.rho_t, quad))
        } else {
            (self.rho_target(self.rho_s, cur, quad), self.rho_target(self.rho_s, prop, quad))
        };
        let jac = (prop * (1.0 - prop)).ln() - (cur * (1.0 - cur)).ln();
        let log_ratio = f1 - f0 + jac;
        if log_ratio.is_finite() && u.ln() < log_ratio {
            if spatial {
                self.rho_s = prop;
            } else {
                self.rho_t = prop;
            }
            true
        } else {
            false
        }
    }

    fn draw_row(&self) -> Vec<f64> {
        let mut row = self.b.clone();
        row.push(self.sigma2);
        row.push(self.tau2);
        if self.nugget {
            row.push(self.sigma_v2);
            row.push(self.mu_v);
        }
        if self.spatial {
            row.push(self.rho_s);
        }
        row.push(self.rho_t);
        row
    }

    fn column_names(&self) -> Vec<String> {
        let mut names = self.p.design.names.clone();
        names.push("sigma2".into());
        names.push("tau2".into());
        if self.nugget {
            names.push("sigma_v2".into());
            names.push("mu_v".into());
        }
        if self.spatial {
            names.push("rho_s".into());
        }
        names.push("rho_t".into());
        names
    }

    fn latent_draw(&self, iteration: usize) -> LatentDraw {
        let params = self.params();
        LatentDraw {
            iteration,
            theta: params.theta,
            g: params.g,
            v_tilde: self.nugget.then_some(params.v_tilde),
        }
    }

    fn run<R: Rng + ?Sized>(&mut self, rng: &mut R, init_attempts: usize) -> Result<PosteriorSamples> {
        let cfg = self.cfg;
        let np = self.b.len();
        let mut blocks: BTreeMap<&'static str, Tally> = BTreeMap::new();
        let mut batch_reg = Tally::default();
        let mut batch_rs = Tally::default();
        let mut batch_rt = Tally::default();
        let mut batch_ns = Tally::default();
        let mut n_batches = 0usize;
        let mut shape_learned = false;
        let cov_from = cfg.burn_in / 4;
        let mut welford_n = 0usize;
        let mut welford_mean = DVector::<f64>::zeros(np);
        let mut welford_m2 = DMatrix::<f64>::zeros(np, np);
        let mut draws = Vec::with_capacity(cfg.n_retained());
        let mut latent = Vec::new();
        let mut clamped_iterations = 0u64;

        for it in 0..cfg.iterations {
            let post = it >= cfg.burn_in;
            self.clamped = false;
            let mut reg = Tally::default();
            let mut th = Tally::default();
            let mut gg = Tally::default();
            let mut vv = Tally::default();
            let mut ns = Tally::default();
            self.regression_block(rng, &mut reg);
            self.theta_sweep(rng, &mut th);
            self.coefficient_shift(rng);
            self.g_sweep(rng, &mut gg);
            if self.nugget {
                self.v_sweep(rng, &mut vv);
                self.nugget_shift(rng, &mut ns);
            }
            let theta_m = DMatrix::from_column_slice(self.nj, self.nt, &self.theta);
            let quad = self.p.structure.quad_components(&theta_m);
            self.variance_updates(rng, &quad)?;
            let mut rs = Tally::default();
            if self.spatial {
                rs.record(self.rho_move(rng, &quad, true));
            }
            let mut rt = Tally::default();
            rt.record(self.rho_move(rng, &quad, false));
            if self.clamped {
                clamped_iterations += 1;
            }

            if post {
                for (name, t) in [("regression", reg), ("theta", th), ("g", gg), ("v_tilde", vv), ("nugget_shift", ns), ("rho_s", rs), ("rho_t", rt)] {
                    let e = blocks.entry(name).or_default();
                    e.tried += t.tried;
                    e.accepted += t.accepted;
                }
                let k = it - cfg.burn_in + 1;
                if k % cfg.thin == 0 {
                    draws.push(self.draw_row());
                }
                if cfg.latent_thin > 0 && k % cfg.latent_thin == 0 {
                    latent.push(self.latent_draw(it));
                }
            } else if cfg.adapt {
                for (acc, t) in [(&mut batch_reg, reg), (&mut batch_rs, rs), (&mut batch_rt, rt), (&mut batch_ns, ns)] {
                    acc.tried += t.tried;
                    acc.accepted += t.accepted;
                }
                if it >= cov_from {
                    welford_n += 1;
                    let x = DVector::from_column_slice(&self.b);
                    let d = &x - &welford_mean;
                    welford_mean += &d / welford_n as f64;
                    let d2 = &x - &welford_mean;
                    welford_m2 += &d * d2.transpose();
                }
                if (it + 1) % cfg.adapt_batch == 0 {
                    n_batches += 1;
                    let gain = (1.0 / (n_batches as f64).sqrt()).min(0.5) * 2.0;
                    self.log_scale += gain * (batch_reg.rate() - cfg.target_accept_regression);
                    if self.spatial {
                        self.log_step_s += gain * (batch_rs.rate() - cfg.target_accept_rho);
                    }
                    self.log_step_t += gain * (batch_rt.rate() - cfg.target_accept_rho);
                    batch_reg = Tally::default();
                    batch_rs = Tally::default();
                    batch_rt = Tally::default();
                    if self.nugget {
                        self.log_step_v += gain * (batch_ns.rate() - cfg.target_accept_rho);
                    }
                    batch_ns = Tally::default();
                    if welford_n >= (4 * np).max(100) {
                        let emp = &welford_m2 / (welford_n - 1) as f64;
                        let shape = (emp + DMatrix::identity(np, np) * 1e-10) * (2.38 * 2.38 / np as f64);
                        if let Some(c) = shape.cholesky() {
                            self.chol = c.l();
                            if !shape_learned {
                                self.log_scale = 0.0;
                                shape_learned = true;
                            }
                        }
                    }
                }
            }
        }
        debug!("regression proposal log-scale {:.3} after adaptation", self.log_scale);

        let acceptance: BTreeMap<String, f64> = blocks
            .into_iter()
            .filter(|(_, t)| t.tried > 0)
            .map(|(k, t)| (k.to_string(), t.rate()))
            .collect();
        let manifest = RunManifest {
            variant: self.p.variant,
            config: cfg.clone(),
            names: self.column_names(),
            n_draws: draws.len(),
            n_regions: self.nj,
            n_times: self.nt,
            n_obs: self.p.n_obs(),
            acceptance,
            clamped_iterations,
            init_attempts,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        Ok(PosteriorSamples {
            manifest,
            draws,
            latent,
            final_params: Some(self.params()),
        })
    }
}

fn inv_gamma_draw<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("gamma draw: {e}")))?;
    Ok(1.0 / gamma.sample(rng))
}

fn cholesky_or_diag(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(c) => c.l(),
        None => DMatrix::from_diagonal(&m.diagonal().map(|d| d.abs().max(1e-12).sqrt())),
    }
}

/// Penalized Poisson log-linear fit of the counts on the regression design,
/// ignoring latent terms. Returns the mode and the penalized Fisher information.
fn poisson_glm(p: &FitProblem) -> (Vec<f64>, DMatrix<f64>) {
    let n = p.n_obs();
    let np = p.n_coefficients();
    let ridge = 1.0 / (PRIOR_COEF_SD * PRIOR_COEF_SD);
    let mean_y = p.y.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; np];
    b[0] = (mean_y + 0.5).ln();
    let mut info = DMatrix::identity(np, np) * ridge;
    for _ in 0..50 {
        let eta = p.eta(&b);
        let mut h = DMatrix::identity(np, np) * ridge;
        let mut grad = DVector::from_iterator(np, b.iter().map(|v| -ridge * v));
        for o in 0..n {
            let mu = clamp_exponent(eta[o]).0.exp();
            let z = p.z_row(o);
            for r in 0..np {
                grad[r] += (p.y[o] - mu) * z[r];
                for c in 0..=r {
                    h[(r, c)] += mu * z[r] * z[c];
                }
            }
        }
        for r in 0..np {
            for c in 0..r {
                h[(c, r)] = h[(r, c)];
            }
        }
        info = h.clone();
        let Some(step) = h.cholesky().map(|c| c.solve(&grad)) else { break };
        let max = step.amax();
        let damp = if max > 1.0 { 1.0 / max } else { 1.0 };
        for (bv, s) in b.iter_mut().zip(step.iter()) {
            *bv += damp * s;
        }
        if max < 1e-8 {
            break;
        }
    }
    (b, info)
}
