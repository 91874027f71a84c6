#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use spillover::graph::{rook_grid, AdjacencyGraph, IsolatedPolicy};
use spillover::inference::{ModelParams, ModelVariant};
use spillover::panel::PanelDataset;
use spillover::propensity::PropensityScores;
use spillover::random_fields::{sample_stcar, StcarParams};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Random connected graph: a random spanning tree plus extra edges.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize, extra: usize) -> AdjacencyGraph {
    let mut edges = Vec::new();
    for k in 1..n {
        edges.push((rng.random_range(0..k), k));
    }
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    AdjacencyGraph::from_edges(n, &edges).unwrap()
}

/// `M - rho C` built entry by entry.
pub fn car_structure(graph: &AdjacencyGraph, rho: f64) -> DMatrix<f64> {
    let n = graph.n_nodes();
    DMatrix::from_fn(n, n, |i, k| {
        if i == k {
            graph.neighbors(i).len() as f64
        } else if graph.neighbors(i).contains(&k) {
            -rho
        } else {
            0.0
        }
    })
}

pub fn path_structure(n_times: usize, rho: f64) -> DMatrix<f64> {
    let mut edges = Vec::new();
    for t in 1..n_times {
        edges.push((t - 1, t));
    }
    car_structure(&AdjacencyGraph::from_edges(n_times, &edges).unwrap(), rho)
}

/// Dense space-time covariance `sigma2 (P_t ⊗ P_s)^{-1}` for `vec` in
/// column-major (region fastest) order.
pub fn dense_stcar_covariance(graph: &AdjacencyGraph, n_times: usize, sigma2: f64, rho_s: f64, rho_t: f64) -> DMatrix<f64> {
    let q = path_structure(n_times, rho_t).kronecker(&car_structure(graph, rho_s));
    q.try_inverse().unwrap() * sigma2
}

/// Multivariate normal log density through a Cholesky factor of the covariance.
pub fn mvn_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let z = l.solve_lower_triangular(x).unwrap();
    -0.5 * x.len() as f64 * LN_2PI - 0.5 * log_det - 0.5 * z.norm_squared()
}

pub fn dense_stcar_log_density(theta: &DMatrix<f64>, graph: &AdjacencyGraph, sigma2: f64, rho_s: f64, rho_t: f64) -> f64 {
    let cov = dense_stcar_covariance(graph, theta.ncols(), sigma2, rho_s, rho_t);
    mvn_log_density(&DVector::from_column_slice(theta.as_slice()), &cov)
}

fn neighbor_mean(graph: &AdjacencyGraph, m: &DMatrix<f64>, j: usize, t: usize) -> f64 {
    let nb = graph.neighbors(j);
    nb.iter().map(|&k| m[(k, t)]).sum::<f64>() / nb.len() as f64
}

fn ln_factorial(y: u64) -> f64 {
    (2..=y).map(|k| (k as f64).ln()).sum()
}

fn normal_lpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean) * (x - mean) / var
}

fn inv_gamma_lpdf(x: f64, a: f64, b: f64) -> f64 {
    let mut shift = 0.0;
    let mut z = a;
    while z < 10.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let stirling = (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + 1.0 / (12.0 * z) - 1.0 / (360.0 * z.powi(3)) + 1.0 / (1260.0 * z.powi(5));
    let ln_gamma_a = stirling + shift;
    a * b.ln() - ln_gamma_a - (a + 1.0) * x.ln() - b / x
}

fn standardized(m: &DMatrix<f64>, from: usize) -> DMatrix<f64> {
    let mut vals = Vec::new();
    for t in from..m.ncols() {
        for j in 0..m.nrows() {
            vals.push(m[(j, t)]);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    m.map(|v| (v - mean) / sd)
}

/// Log likelihood and log prior written as plain loops over cells.
pub fn naive_log_kernel(
    params: &ModelParams,
    ds: &PanelDataset,
    scores: Option<&PropensityScores>,
    variant: ModelVariant,
    lag: usize,
    window_start: usize,
) -> (f64, f64) {
    let (nj, nt) = (ds.n_regions(), ds.n_times());
    let nugget = matches!(variant, ModelVariant::Full | ModelVariant::NoPs);
    let ps = !matches!(variant, ModelVariant::NoPs);
    let (e, et) = match (ps, scores) {
        (true, Some(sc)) => (Some(standardized(&sc.e, sc.valid_from)), Some(standardized(&sc.e_tilde, sc.valid_from))),
        _ => (None, None),
    };
    let mut ll = 0.0;
    for t in window_start..nt {
        for j in 0..nj {
            let s = t - lag;
            let mut eta = params.alpha0;
            let q = ds.x.len();
            for k in 0..q {
                eta += params.alpha1[k] * ds.x[k][(j, s)];
                eta += params.alpha2[k] * neighbor_mean(&ds.graph, &ds.x[k], j, s);
            }
            if let (Some(e), Some(et)) = (&e, &et) {
                eta += params.alpha1[q] * e[(j, s)];
                eta += params.alpha1[q + 1] * e[(j, s)] * e[(j, s)];
                eta += params.alpha1[q + 2] * e[(j, s)] * et[(j, s)];
                eta += params.alpha2[q] * et[(j, s)];
                eta += params.alpha2[q + 1] * et[(j, s)] * et[(j, s)];
            }
            eta += params.delta1 * ds.a[(j, s)];
            eta += params.delta2 * neighbor_mean(&ds.graph, &ds.a, j, s);
            let mut rate = (params.g[(j, t)] + eta + params.theta[(j, s)]).exp();
            if nugget {
                rate += params.v_tilde[(j, t)].exp();
            }
            let y = ds.y[(j, t)];
            ll += y as f64 * rate.ln() - rate - ln_factorial(y);
        }
    }

    let mut lp = 0.0;
    let mut coefs = vec![params.alpha0, params.delta1, params.delta2];
    coefs.extend(&params.alpha1);
    coefs.extend(&params.alpha2);
    for b in coefs {
        lp += normal_lpdf(b, 0.0, 100.0);
    }
    lp += inv_gamma_lpdf(params.sigma2, 0.1, 0.1) + inv_gamma_lpdf(params.tau2, 0.1, 0.1);
    if nugget {
        lp += inv_gamma_lpdf(params.sigma_v2, 0.1, 0.1) + normal_lpdf(params.mu_v, 0.0, 100.0);
    }
    lp += dense_stcar_log_density(&params.theta, &ds.graph, params.sigma2, params.rho_s, params.rho_t);
    for t in window_start..nt {
        for j in 0..nj {
            lp += normal_lpdf(params.g[(j, t)], 0.0, params.tau2);
            if nugget {
                lp += normal_lpdf(params.v_tilde[(j, t)], params.mu_v, params.sigma_v2);
            }
        }
    }
    (ll, lp)
}

/// `(X'X)^{-1} X'y` by LU on the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.lu().solve(&xty).unwrap()
}

/// Panel drawn from the fitted model itself: STCAR `theta`, no `g`, no
/// nugget, and the given `delta1`.
pub fn model_consistent_panel<R: Rng>(rng: &mut R, rows: usize, cols: usize, n_times: usize, delta1: f64) -> PanelDataset {
    let graph = rook_grid(rows, cols).unwrap();
    let nj = graph.n_nodes();
    let field = |rng: &mut R, sigma: f64| {
        sample_stcar(&graph, n_times, &StcarParams { sigma, rho_s: 0.8, rho_t: 0.6 }, IsolatedPolicy::Error, rng).unwrap()
    };
    let x = field(rng, 1.0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let a = x.map(|v| 0.5 * v + 0.8 * noise.sample(rng));
    let theta = field(rng, 0.3);
    let mean_of = |m: &DMatrix<f64>, j: usize, t: usize| neighbor_mean(&graph, m, j, t);
    let mut y = DMatrix::<u64>::zeros(nj, n_times);
    for t in 0..n_times {
        for j in 0..nj {
            let eta = 1.5 + 0.3 * x[(j, t)] + 0.2 * mean_of(&x, j, t) + delta1 * a[(j, t)] + 0.2 * mean_of(&a, j, t);
            let rate = (eta + theta[(j, t)]).exp();
            if t + 2 < n_times {
                y[(j, t + 2)] = Poisson::new(rate).unwrap().sample(rng) as u64;
            }
        }
    }
    PanelDataset {
        graph: graph.clone(),
        y,
        a,
        x: vec![x],
        x_names: vec!["X1".into()],
        population: vec![1e5; nj],
        unobserved_prefix: 2,
        truth: None,
    }
}

pub fn random_params<R: Rng>(rng: &mut R, n_alpha1: usize, n_alpha2: usize, nj: usize, nt: usize, variant: ModelVariant) -> ModelParams {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let spatial = variant != ModelVariant::NonSpatial;
    ModelParams {
        alpha0: u(-1.0, 1.0),
        alpha1: (0..n_alpha1).map(|_| u(-0.3, 0.3)).collect(),
        alpha2: (0..n_alpha2).map(|_| u(-0.3, 0.3)).collect(),
        delta1: u(-0.5, 0.5),
        delta2: u(-0.5, 0.5),
        sigma2: u(0.1, 2.0),
        tau2: u(0.1, 2.0),
        sigma_v2: u(0.1, 2.0),
        mu_v: u(-2.0, 1.0),
        rho_s: if spatial { u(0.05, 0.95) } else { 0.0 },
        rho_t: u(0.05, 0.95),
        theta: DMatrix::from_fn(nj, nt, |_, _| u(-0.5, 0.5)),
        g: DMatrix::from_fn(nj, nt, |_, _| u(-0.3, 0.3)),
        v_tilde: DMatrix::from_fn(nj, nt, |_, _| u(-2.0, 0.0)),
    }
}
