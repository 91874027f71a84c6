//! CAR and separable space-time CAR (STCAR) Gaussian fields.
//!
//! A CAR field on a graph has precision `(M - rho C) / sigma^2`. The STCAR
//! field on `J` regions and `T` times stacks the field time-major
//! (`theta(1), ..., theta(T)`), which is exactly the column-major layout of
//! a `J x T` matrix, and has precision
//! `(M_t - rho_t C_t) ⊗ (M_s - rho_s C_s) / sigma^2`.
//!
//! Both factors are handled through one symmetric eigendecomposition of the
//! normalized adjacency `M^{-1/2} C M^{-1/2}`, which does not depend on rho:
//! `log det(M - rho C) = sum log m_j + sum log(1 - rho * lambda_i)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{temporal_path_graph, AdjacencyGraph, IsolatedPolicy};
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams<S> {
    pub sigma: S,
    pub rho: S,
}

impl<S: Scalar> CarParams<S> {
    pub fn new(sigma: S, rho: S) -> Result<Self> {
        let p = Self { sigma, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > S::zero()) {
            return invalid(format!("sigma must be positive, got {}", self.sigma));
        }
        check_rho("rho", self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StcarParams<S> {
    pub sigma: S,
    pub rho_s: S,
    pub rho_t: S,
}

impl<S: Scalar> StcarParams<S> {
    pub fn new(sigma: S, rho_s: S, rho_t: S) -> Result<Self> {
        let p = Self { sigma, rho_s, rho_t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > S::zero()) {
            return invalid(format!("sigma must be positive, got {}", self.sigma));
        }
        check_rho("rho_s", self.rho_s)?;
        check_rho("rho_t", self.rho_t)
    }
}

fn check_rho<S: Scalar>(name: &str, rho: S) -> Result<()> {
    if rho >= S::zero() && rho < S::one() {
        Ok(())
    } else {
        invalid(format!("{name} must lie in [0, 1), got {rho}"))
    }
}

/// Eigen-structure of `M - rho C` for one graph.
#[derive(Debug, Clone)]
pub struct CarSpectrum {
    degrees: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: Option<DMatrix<f64>>,
    log_det_m: f64,
}

impl CarSpectrum {
    /// `with_vectors` is only needed for sampling.
    pub fn new(graph: &AdjacencyGraph, policy: IsolatedPolicy, with_vectors: bool) -> Result<Self> {
        let degrees: Vec<f64> = graph
            .effective_degrees(policy)?
            .into_iter()
            .map(|m| m as f64)
            .collect();
        let n = graph.n_nodes();
        let mut normalized = DMatrix::<f64>::zeros(n, n);
        for (j, k) in graph.edges() {
            let w = 1.0 / (degrees[j] * degrees[k]).sqrt();
            normalized[(j, k)] = w;
            normalized[(k, j)] = w;
        }
        let (eigenvalues, eigenvectors) = if with_vectors {
            let eig = normalized.symmetric_eigen();
            (eig.eigenvalues.iter().copied().collect(), Some(eig.eigenvectors))
        } else {
            (normalized.symmetric_eigenvalues().iter().copied().collect(), None)
        };
        let eigenvalues: Vec<f64> = eigenvalues;
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "eigendecomposition of the normalized adjacency produced non-finite values".into(),
            ));
        }
        let log_det_m = degrees.iter().map(|m| m.ln()).sum();
        Ok(Self {
            degrees,
            eigenvalues,
            eigenvectors,
            log_det_m,
        })
    }

    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue of the normalized precision `I - rho D`.
    pub fn min_normalized_eigenvalue(&self, rho: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&l| 1.0 - rho * l)
            .fold(f64::INFINITY, f64::min)
    }

    /// `log det(M - rho C)`.
    pub fn log_det(&self, rho: f64) -> f64 {
        self.log_det_m + self.eigenvalues.iter().map(|&l| (1.0 - rho * l).ln()).sum::<f64>()
    }

    /// `L` with `L L^T = (M - rho C)^{-1}`.
    pub fn covariance_factor(&self, rho: f64) -> Result<DMatrix<f64>> {
        let vectors = self.eigenvectors.as_ref().ok_or_else(|| {
            Error::Internal("covariance factor requested from a values-only spectrum".into())
        })?;
        let min = self.min_normalized_eigenvalue(rho);
        if !(min > 0.0) {
            return Err(Error::Numerical(format!(
                "M - rho C is not positive definite at rho = {rho}: smallest normalized eigenvalue {min:e}"
            )));
        }
        let n = self.dim();
        let mut l = vectors.clone();
        for c in 0..n {
            let s = (1.0 - rho * self.eigenvalues[c]).sqrt().recip();
            for r in 0..n {
                l[(r, c)] *= s / self.degrees[r].sqrt();
            }
        }
        Ok(l)
    }
}

/// Space and time structure of an STCAR field with cached spectra.
#[derive(Debug, Clone)]
pub struct StcarStructure {
    space: AdjacencyGraph,
    time: AdjacencyGraph,
    space_degrees: Vec<f64>,
    time_degrees: Vec<f64>,
    space_spectrum: CarSpectrum,
    time_spectrum: CarSpectrum,
}

impl StcarStructure {
    /// Isolated spatial nodes follow `policy`; a single time point is always
    /// treated as its own neighbor (temporal degree 1).
    pub fn new(
        space: &AdjacencyGraph,
        n_times: usize,
        policy: IsolatedPolicy,
        with_vectors: bool,
    ) -> Result<Self> {
        let time = temporal_path_graph(n_times)?;
        let space_spectrum = CarSpectrum::new(space, policy, with_vectors)?;
        let time_spectrum = CarSpectrum::new(&time, IsolatedPolicy::SelfLoop, with_vectors)?;
        Ok(Self {
            space_degrees: space_spectrum.degrees.clone(),
            time_degrees: time_spectrum.degrees.clone(),
            space: space.clone(),
            time,
            space_spectrum,
            time_spectrum,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.space.n_nodes()
    }

    pub fn n_times(&self) -> usize {
        self.time.n_nodes()
    }

    pub fn space(&self) -> &AdjacencyGraph {
        &self.space
    }

    pub fn time(&self) -> &AdjacencyGraph {
        &self.time
    }

    pub fn space_degrees(&self) -> &[f64] {
        &self.space_degrees
    }

    pub fn time_degrees(&self) -> &[f64] {
        &self.time_degrees
    }

    /// `log det((M_t - rho_t C_t) ⊗ (M_s - rho_s C_s))`.
    pub fn log_det_kron(&self, rho_s: f64, rho_t: f64) -> f64 {
        let (j, t) = (self.n_regions() as f64, self.n_times() as f64);
        j * self.time_spectrum.log_det(rho_t) + t * self.space_spectrum.log_det(rho_s)
    }

    /// The four traces whose combination
    /// `a - rho_s b - rho_t c + rho_s rho_t d` is the unscaled quadratic form
    /// `vec(theta)^T (P_t ⊗ P_s) vec(theta)`.
    pub fn quad_components<S: Scalar>(&self, theta: &DMatrix<S>) -> [S; 4] {
        let (nj, nt) = (self.n_regions(), self.n_times());
        let (mut a, mut b, mut c, mut d) = (S::zero(), S::zero(), S::zero(), S::zero());
        for t in 0..nt {
            let mt = S::of(self.time_degrees[t]);
            for j in 0..nj {
                let x = theta[(j, t)];
                let ms = S::of(self.space_degrees[j]);
                let space_sum = self
                    .space
                    .neighbors(j)
                    .iter()
                    .fold(S::zero(), |acc, &k| acc + theta[(k, t)]);
                a = a + ms * mt * x * x;
                b = b + mt * x * space_sum;
                for &u in self.time.neighbors(t) {
                    c = c + ms * x * theta[(j, u)];
                    let cross = self
                        .space
                        .neighbors(j)
                        .iter()
                        .fold(S::zero(), |acc, &k| acc + theta[(k, u)]);
                    d = d + x * cross;
                }
            }
        }
        [a, b, c, d]
    }

    pub fn quad_form<S: Scalar>(&self, theta: &DMatrix<S>, rho_s: S, rho_t: S) -> S {
        let [a, b, c, d] = self.quad_components(theta);
        a - rho_s * b - rho_t * c + rho_s * rho_t * d
    }

    pub fn check_shape<S: Scalar>(&self, theta: &DMatrix<S>) -> Result<()> {
        if theta.nrows() != self.n_regions() || theta.ncols() != self.n_times() {
            return Err(Error::Dimension(format!(
                "field is {}x{}, expected {}x{}",
                theta.nrows(),
                theta.ncols(),
                self.n_regions(),
                self.n_times()
            )));
        }
        Ok(())
    }

    /// Exact multivariate-normal log density of `theta` (J x T).
    pub fn log_density<S: Scalar>(&self, theta: &DMatrix<S>, params: &StcarParams<S>) -> Result<S> {
        params.validate()?;
        self.check_shape(theta)?;
        let n = S::from_count(theta.len());
        let sigma2 = params.sigma * params.sigma;
        let log_det = S::of(self.log_det_kron(
            params.rho_s.to_f64_lossy(),
            params.rho_t.to_f64_lossy(),
        )) - n * sigma2.ln();
        let quad = self.quad_form(theta, params.rho_s, params.rho_t) / sigma2;
        let half = S::of(0.5);
        Ok(-half * n * S::of(LN_2PI) + half * log_det - half * quad)
    }

    /// Draw from STCAR(sigma, rho_s, rho_t). Requires spectra built with vectors.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        params: &StcarParams<S>,
        rng: &mut R,
    ) -> Result<DMatrix<S>> {
        params.validate()?;
        let ls = self.space_spectrum.covariance_factor(params.rho_s.to_f64_lossy())?;
        let lt = self.time_spectrum.covariance_factor(params.rho_t.to_f64_lossy())?;
        let (nj, nt) = (self.n_regions(), self.n_times());
        let z = DMatrix::<f64>::from_fn(nj, nt, |_, _| rng.sample(StandardNormal));
        let x = ls * z * lt.transpose();
        Ok(x.map(|v| S::of(v) * params.sigma))
    }
}

/// Draw from CAR(sigma, rho) on `graph`.
pub fn sample_car<S: Scalar, R: Rng + ?Sized>(
    graph: &AdjacencyGraph,
    params: &CarParams<S>,
    policy: IsolatedPolicy,
    rng: &mut R,
) -> Result<DVector<S>> {
    params.validate()?;
    let spectrum = CarSpectrum::new(graph, policy, true)?;
    let l = spectrum.covariance_factor(params.rho.to_f64_lossy())?;
    let z = DVector::<f64>::from_fn(graph.n_nodes(), |_, _| rng.sample(StandardNormal));
    Ok((l * z).map(|v| S::of(v) * params.sigma))
}

/// Draw a `J x T` field from STCAR(sigma, rho_s, rho_t).
pub fn sample_stcar<S: Scalar, R: Rng + ?Sized>(
    space: &AdjacencyGraph,
    n_times: usize,
    params: &StcarParams<S>,
    policy: IsolatedPolicy,
    rng: &mut R,
) -> Result<DMatrix<S>> {
    StcarStructure::new(space, n_times, policy, true)?.sample(params, rng)
}

/// Log density of a `J x T` field under STCAR(sigma, rho_s, rho_t).
pub fn stcar_log_density<S: Scalar>(
    theta: &DMatrix<S>,
    space: &AdjacencyGraph,
    n_times: usize,
    params: &StcarParams<S>,
    policy: IsolatedPolicy,
) -> Result<S> {
    if n_times == 0 || theta.ncols() != n_times || theta.nrows() != space.n_nodes() {
        return Err(Error::Dimension(format!(
            "field is {}x{}, expected {}x{}",
            theta.nrows(),
            theta.ncols(),
            space.n_nodes(),
            n_times
        )));
    }
    StcarStructure::new(space, n_times, policy, false)?.log_density(theta, params)
}
