//! Deterministic spatial SIR difference equations with a stochastic, lagged,
//! under-reported Poisson observation layer, and the synthetic scenario
//! generator built on top of them.
//!
//! Isolated regions (no neighbors) couple only to themselves, so their
//! contact weight collapses to `W_jj = 1`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{neighbor_average, rook_grid, AdjacencyGraph, IsolatedPolicy};
use crate::panel::{PanelDataset, Truth};
use crate::random_fields::{CarParams, StcarParams, StcarStructure, sample_car};
use crate::scalar::Scalar;

/// Compartment sizes of every region at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicState<S> {
    pub susceptible: Vec<S>,
    pub infected: Vec<S>,
    pub recovered: Vec<S>,
    pub population: Vec<S>,
}

impl<S: Scalar> EpidemicState<S> {
    /// `S = N - I`, `R = 0`.
    pub fn seeded(population: Vec<S>, infected: Vec<S>) -> Result<Self> {
        if population.len() != infected.len() {
            return Err(Error::Dimension("population and infected lengths differ".into()));
        }
        if population.iter().zip(&infected).any(|(&n, &i)| !(n > S::zero()) || i < S::zero() || i > n) {
            return invalid("need N > 0 and 0 <= I <= N in every region");
        }
        Ok(Self {
            susceptible: population.iter().zip(&infected).map(|(&n, &i)| n - i).collect(),
            recovered: vec![S::zero(); population.len()],
            infected,
            population,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.population.len()
    }

    /// Largest `|S + I + R - N| / N` over regions.
    pub fn conservation_error(&self) -> S {
        (0..self.n_regions())
            .map(|j| {
                let total = self.susceptible[j] + self.infected[j] + self.recovered[j];
                (total - self.population[j]).abs() / self.population[j]
            })
            .fold(S::zero(), S::max)
    }
}

/// Log-linear infection-rate model
/// `log beta = alpha0 + X alpha1 + X~ alpha2 + A delta1 + A~ delta2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaModel {
    pub alpha0: f64,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for BetaModel {
    fn default() -> Self {
        Self {
            alpha0: -3.0,
            alpha1: vec![0.5],
            alpha2: vec![0.3],
            delta1: 0.5,
            delta2: 0.2,
        }
    }
}

impl BetaModel {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1.len() != self.alpha2.len() {
            return invalid("alpha1 and alpha2 must have one entry per covariate");
        }
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.alpha1.len()
    }

    /// `log beta_j(t)` for all regions and times.
    pub fn log_beta(
        &self,
        a: &DMatrix<f64>,
        a_tilde: &DMatrix<f64>,
        x: &[DMatrix<f64>],
        x_tilde: &[DMatrix<f64>],
    ) -> DMatrix<f64> {
        let mut eta = a * self.delta1 + a_tilde * self.delta2;
        eta.add_scalar_mut(self.alpha0);
        for (k, (xk, xtk)) in x.iter().zip(x_tilde).enumerate() {
            eta += xk * self.alpha1[k] + xtk * self.alpha2[k];
        }
        eta
    }
}

fn contact_mix<S: Scalar>(graph: &AdjacencyGraph, infected: &[S], phi: S) -> Result<Vec<S>> {
    let column = DMatrix::from_column_slice(infected.len(), 1, infected);
    let avg = neighbor_average(graph, &column, IsolatedPolicy::SelfLoop)?;
    Ok(infected
        .iter()
        .zip(avg.iter())
        .map(|(&i, &ibar)| (S::one() - phi) * i + phi * ibar)
        .collect())
}

fn check_rate_inputs<S: Scalar>(state: &EpidemicState<S>, graph: &AdjacencyGraph, phi: S, beta: &[S]) -> Result<()> {
    if graph.n_nodes() != state.n_regions() || beta.len() != state.n_regions() {
        return Err(Error::Dimension(format!(
            "graph has {} nodes, state {} regions, beta {} entries",
            graph.n_nodes(),
            state.n_regions(),
            beta.len()
        )));
    }
    if !(phi >= S::zero() && phi <= S::one()) {
        return invalid(format!("phi must lie in [0, 1], got {phi}"));
    }
    if beta.iter().any(|&b| !(b >= S::zero())) {
        return invalid("infection rates beta must be nonnegative");
    }
    Ok(())
}

/// `lambda_j = beta_j (S_j / N_j) sum_k W_jk I_k` before capping.
pub fn raw_infection_rate<S: Scalar>(
    state: &EpidemicState<S>,
    graph: &AdjacencyGraph,
    phi: S,
    beta: &[S],
) -> Result<Vec<S>> {
    check_rate_inputs(state, graph, phi, beta)?;
    let mixed = contact_mix(graph, &state.infected, phi)?;
    Ok((0..state.n_regions())
        .map(|j| beta[j] * (state.susceptible[j] / state.population[j]) * mixed[j])
        .collect())
}

/// New infections per region, capped at the susceptible pool.
pub fn infection_rate<S: Scalar>(
    state: &EpidemicState<S>,
    graph: &AdjacencyGraph,
    phi: S,
    beta: &[S],
) -> Result<Vec<S>> {
    let raw = raw_infection_rate(state, graph, phi, beta)?;
    Ok(raw
        .into_iter()
        .zip(&state.susceptible)
        .map(|(l, &s)| l.max(S::zero()).min(s))
        .collect())
}

/// One SIR difference step.
pub fn step<S: Scalar>(state: &EpidemicState<S>, lambda: &[S], gamma: S) -> Result<EpidemicState<S>> {
    if !(gamma > S::zero() && gamma <= S::one()) {
        return invalid(format!("gamma must lie in (0, 1], got {gamma}"));
    }
    if lambda.len() != state.n_regions() {
        return Err(Error::Dimension("lambda length differs from region count".into()));
    }
    if let Some(j) = (0..state.n_regions())
        .find(|&j| !(lambda[j] >= S::zero() && lambda[j] <= state.susceptible[j]))
    {
        return Err(Error::Internal(format!(
            "new infections {} exceed susceptibles {} in region {j}",
            lambda[j], state.susceptible[j]
        )));
    }
    let mut next = state.clone();
    for j in 0..state.n_regions() {
        let recoveries = gamma * state.infected[j];
        next.susceptible[j] = state.susceptible[j] - lambda[j];
        next.infected[j] = state.infected[j] + lambda[j] - recoveries;
        next.recovered[j] = state.recovered[j] + recoveries;
    }
    Ok(next)
}

/// Splits the (uncapped) infection rate into `beta exp(theta) + v`, with
/// `exp(theta) = S I / N` and `v` the neighbor-difference term. Regions with
/// no infections get `theta = -inf`.
pub fn decompose_rate<S: Scalar>(
    state: &EpidemicState<S>,
    graph: &AdjacencyGraph,
    phi: S,
    beta: &[S],
) -> Result<(Vec<S>, Vec<S>)> {
    check_rate_inputs(state, graph, phi, beta)?;
    let column = DMatrix::from_column_slice(state.n_regions(), 1, &state.infected);
    let avg = neighbor_average(graph, &column, IsolatedPolicy::SelfLoop)?;
    let mut theta = Vec::with_capacity(state.n_regions());
    let mut v = Vec::with_capacity(state.n_regions());
    for j in 0..state.n_regions() {
        let frac = state.susceptible[j] / state.population[j];
        theta.push((state.susceptible[j] * state.infected[j] / state.population[j]).ln());
        v.push(beta[j] * phi * frac * (avg[(j, 0)] - state.infected[j]));
    }
    Ok((theta, v))
}

/// Reported counts `Y_j(t) ~ Poisson(p exp(g) lambda_j(t - lag))` with
/// `g ~ Normal(0, tau^2)`. The first `lag` times are unobservable and set
/// to zero.
pub fn observe<R: Rng + ?Sized>(
    lambda: &DMatrix<f64>,
    reporting_rate: f64,
    tau: f64,
    lag: usize,
    rng: &mut R,
) -> Result<DMatrix<u64>> {
    observe_with_noise(lambda, reporting_rate, tau, lag, rng).map(|(y, _)| y)
}

pub(crate) fn observe_with_noise<R: Rng + ?Sized>(
    lambda: &DMatrix<f64>,
    reporting_rate: f64,
    tau: f64,
    lag: usize,
    rng: &mut R,
) -> Result<(DMatrix<u64>, DMatrix<f64>)> {
    if !(reporting_rate > 0.0 && reporting_rate <= 1.0) {
        return invalid(format!("reporting rate must lie in (0, 1], got {reporting_rate}"));
    }
    if !(tau >= 0.0) {
        return invalid(format!("tau must be nonnegative, got {tau}"));
    }
    let (nj, nt) = lambda.shape();
    let noise = Normal::new(0.0, tau).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut y = DMatrix::<u64>::zeros(nj, nt);
    let mut g = DMatrix::<f64>::zeros(nj, nt);
    for t in lag..nt {
        for j in 0..nj {
            let gj = if tau > 0.0 { noise.sample(rng) } else { 0.0 };
            g[(j, t)] = gj;
            let rate = reporting_rate * gj.exp() * lambda[(j, t - lag)];
            y[(j, t)] = if rate > 0.0 {
                let pois = Poisson::new(rate).map_err(|e| Error::Numerical(format!("Poisson({rate}): {e}")))?;
                pois.sample(rng) as u64
            } else {
                0
            };
        }
    }
    Ok((y, g))
}

/// Parameters of one synthetic data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_times: usize,
    pub population: f64,
    /// `I_j(1) = initial_infected * exp(U_j)`.
    pub initial_infected: f64,
    pub gamma: f64,
    pub phi: f64,
    pub rho_s: f64,
    pub rho_t: f64,
    pub rho_x: f64,
    pub beta: BetaModel,
    pub reporting_rate: f64,
    pub lag: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rows: 15,
            cols: 15,
            n_times: 30,
            population: 100_000.0,
            initial_infected: 100.0,
            gamma: 0.1,
            phi: 0.4,
            rho_s: 0.9,
            rho_t: 0.5,
            rho_x: 0.5,
            beta: BetaModel::default(),
            reporting_rate: 0.5,
            lag: 2,
            tau: 0.0,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.n_times == 0 {
            return invalid("grid dimensions and n_times must be positive");
        }
        if !(self.population > 0.0) || !(self.initial_infected >= 0.0) {
            return invalid("population must be positive and initial_infected nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        for (name, v) in [("phi", self.phi), ("rho_x", self.rho_x)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("rho_s", self.rho_s), ("rho_t", self.rho_t)] {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.reporting_rate > 0.0 && self.reporting_rate <= 1.0) {
            return invalid("reporting_rate must lie in (0, 1]");
        }
        if !(self.tau >= 0.0) {
            return invalid("tau must be nonnegative");
        }
        self.beta.validate()?;
        if self.beta.n_covariates() == 0 {
            return invalid("the scenario generator needs at least one confounder");
        }
        Ok(())
    }
}

/// Simulates latent SIR paths and reported counts for one scenario.
///
/// `I(1) = I0 exp(U)` with `U ~ CAR(1, rho_s)`; every covariate is an
/// independent STCAR(1, rho_s, rho_t) field; the intervention is
/// `A = rho_x X_1 + sqrt(1 - rho_x^2) E` with an independent STCAR `E`.
pub fn simulate_scenario(config: &ScenarioConfig) -> Result<PanelDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let graph = rook_grid(config.rows, config.cols)?;
    let (nj, nt) = (graph.n_nodes(), config.n_times);
    let policy = IsolatedPolicy::Error;

    let u = sample_car(&graph, &CarParams::new(1.0, config.rho_s)?, policy, &mut rng)?;
    let field = StcarStructure::new(&graph, nt, policy, true)?;
    let unit = StcarParams::new(1.0, config.rho_s, config.rho_t)?;
    let x: Vec<DMatrix<f64>> = (0..config.beta.n_covariates())
        .map(|_| field.sample(&unit, &mut rng))
        .collect::<Result<_>>()?;
    let e: DMatrix<f64> = field.sample(&unit, &mut rng)?;
    let a = &x[0] * config.rho_x + e * (1.0 - config.rho_x * config.rho_x).sqrt();

    let a_tilde = neighbor_average(&graph, &a, policy)?;
    let x_tilde: Vec<_> = x
        .iter()
        .map(|xk| neighbor_average(&graph, xk, policy))
        .collect::<Result<_>>()?;
    let log_beta = config.beta.log_beta(&a, &a_tilde, &x, &x_tilde);

    let population = vec![config.population; nj];
    let infected0: Vec<f64> = u
        .iter()
        .map(|&uj| (config.initial_infected * uj.exp()).min(config.population))
        .collect();
    let mut state = EpidemicState::seeded(population.clone(), infected0)?;

    let mut truth = Truth::zeros(nj, nt, config.beta.clone());
    truth.log_beta = log_beta.clone();
    for t in 0..nt {
        let beta: Vec<f64> = log_beta.column(t).iter().map(|v| v.exp()).collect();
        let lambda = infection_rate(&state, &graph, config.phi, &beta)?;
        let (theta, v) = decompose_rate(&state, &graph, config.phi, &beta)?;
        for j in 0..nj {
            truth.susceptible[(j, t)] = state.susceptible[j];
            truth.infected[(j, t)] = state.infected[j];
            truth.recovered[(j, t)] = state.recovered[j];
            truth.lambda[(j, t)] = lambda[j];
            truth.theta[(j, t)] = theta[j];
            truth.v[(j, t)] = v[j];
        }
        if t + 1 < nt {
            state = step(&state, &lambda, config.gamma)?;
        }
    }

    let (y, g) = observe_with_noise(&truth.lambda, config.reporting_rate, config.tau, config.lag, &mut rng)?;
    truth.g = g;

    let x_names = (1..=x.len()).map(|k| format!("X{k}")).collect();
    let ds = PanelDataset {
        graph,
        y,
        a,
        x,
        x_names,
        population,
        unobserved_prefix: config.lag,
        truth: Some(truth),
    };
    ds.validate()?;
    Ok(ds)
}
