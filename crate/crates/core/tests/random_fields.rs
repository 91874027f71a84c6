mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spillover::graph::{rook_grid, IsolatedPolicy};
use spillover::random_fields::{sample_car, sample_stcar, stcar_log_density, CarParams, StcarParams};

use common::{car_structure, dense_stcar_covariance, dense_stcar_log_density, mvn_log_density, random_connected_graph};

#[test]
fn density_matches_dense_covariance_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let nj = rng.random_range(2..=8);
        let nt = rng.random_range(2..=64 / nj);
        let g = random_connected_graph(&mut rng, nj, 3);
        let p = StcarParams {
            sigma: rng.random_range(0.2..2.0),
            rho_s: rng.random_range(0.0..0.99),
            rho_t: rng.random_range(0.0..0.99),
        };
        let theta = DMatrix::from_fn(nj, nt, |_, _| rng.random_range(-2.0..2.0));
        let got = stcar_log_density(&theta, &g, nt, &p, IsolatedPolicy::Error).unwrap();
        let want = dense_stcar_log_density(&theta, &g, p.sigma * p.sigma, p.rho_s, p.rho_t);
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
}

#[test]
fn stcar_draws_have_the_oracle_covariance() {
    let g = random_connected_graph(&mut ChaCha8Rng::seed_from_u64(3), 4, 2);
    let (nt, sigma, rho_s, rho_t) = (3, 0.7, 0.8, 0.5);
    let cov = dense_stcar_covariance(&g, nt, sigma * sigma, rho_s, rho_t);
    let params = StcarParams { sigma, rho_s, rho_t };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let d = 4 * nt;
    let mut acc = DMatrix::<f64>::zeros(d, d);
    let mut mean = DVector::<f64>::zeros(d);
    for _ in 0..n {
        let x = sample_stcar(&g, nt, &params, IsolatedPolicy::Error, &mut rng).unwrap();
        let v = DVector::from_column_slice(x.as_slice());
        mean += &v;
        acc += &v * v.transpose();
    }
    mean /= n as f64;
    let emp = acc / n as f64 - &mean * mean.transpose();
    for i in 0..d {
        for k in 0..d {
            let se = ((cov[(i, i)] * cov[(k, k)] + cov[(i, k)].powi(2)) / n as f64).sqrt();
            assert!((emp[(i, k)] - cov[(i, k)]).abs() < 5.0 * se, "({i},{k}) {} vs {}", emp[(i, k)], cov[(i, k)]);
        }
        assert!(mean[i].abs() < 5.0 * (cov[(i, i)] / n as f64).sqrt());
    }
}

#[test]
fn car_draws_have_the_oracle_covariance() {
    let g = rook_grid(2, 3).unwrap();
    let (sigma, rho) = (1.3, 0.9);
    let cov = car_structure(&g, rho).try_inverse().unwrap() * (sigma * sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40_000;
    let mut acc = DMatrix::<f64>::zeros(6, 6);
    for _ in 0..n {
        let x = sample_car(&g, &CarParams { sigma, rho }, IsolatedPolicy::Error, &mut rng).unwrap();
        acc += &x * x.transpose();
    }
    let emp = acc / n as f64;
    for i in 0..6 {
        for k in 0..6 {
            let se = ((cov[(i, i)] * cov[(k, k)] + cov[(i, k)].powi(2)) / n as f64).sqrt();
            assert!((emp[(i, k)] - cov[(i, k)]).abs() < 5.0 * se);
        }
    }
}

#[test]
fn f32_density_tracks_f64() {
    let g = rook_grid(2, 2).unwrap();
    let theta = DMatrix::from_fn(4, 3, |j, t| (j as f64 - 1.5) * 0.3 + t as f64 * 0.1);
    let p64 = StcarParams { sigma: 0.8, rho_s: 0.6, rho_t: 0.4 };
    let p32 = StcarParams { sigma: 0.8f32, rho_s: 0.6, rho_t: 0.4 };
    let d64 = stcar_log_density(&theta, &g, 3, &p64, IsolatedPolicy::Error).unwrap();
    let d32 = stcar_log_density(&theta.map(|v| v as f32), &g, 3, &p32, IsolatedPolicy::Error).unwrap();
    assert!((d64 - d32 as f64).abs() < 1e-4 * d64.abs().max(1.0));
}

#[test]
fn mvn_oracle_reduces_to_univariate() {
    let cov = DMatrix::from_element(1, 1, 4.0);
    let x = DVector::from_element(1, 1.0);
    let want = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.125;
    assert!((mvn_log_density(&x, &cov) - want).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_is_even_and_peaks_at_zero(seed in 0u64..1000, rho_s in 0.0f64..0.95, rho_t in 0.0f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_connected_graph(&mut rng, 5, 2);
        let p = StcarParams { sigma: 1.0, rho_s, rho_t };
        let theta = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let d = stcar_log_density(&theta, &g, 4, &p, IsolatedPolicy::Error).unwrap();
        let neg = stcar_log_density(&(-&theta), &g, 4, &p, IsolatedPolicy::Error).unwrap();
        let zero = stcar_log_density(&DMatrix::zeros(5, 4), &g, 4, &p, IsolatedPolicy::Error).unwrap();
        prop_assert!((d - neg).abs() < 1e-10);
        prop_assert!(zero >= d);
    }
}
