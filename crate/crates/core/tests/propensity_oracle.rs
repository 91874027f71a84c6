mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spillover::graph::IsolatedPolicy;
use spillover::propensity::{build_design_matrix, estimate_scores, fit_least_squares, IndirectMethod, PropensityDesign};
use spillover::sir::{simulate_scenario, ScenarioConfig};

#[test]
fn least_squares_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.random_range(20..80);
        let p = rng.random_range(1..8);
        let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let fit = fit_least_squares(&x, &y).unwrap();
        let want = common::normal_equations(&x, &y);
        assert!(!fit.used_pseudoinverse);
        for k in 0..p {
            assert!((fit.coefficients[k] - want[k]).abs() <= 1e-8, "{} vs {}", fit.coefficients[k], want[k]);
        }
    }
}

#[test]
fn scores_are_fitted_values_of_the_design() {
    let ds = simulate_scenario(&ScenarioConfig { rows: 4, cols: 4, n_times: 10, seed: 2, ..Default::default() }).unwrap();
    let design = PropensityDesign::simulation();
    let sc = estimate_scores(&ds, &design, IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
    let dm = build_design_matrix(&ds, &design).unwrap();
    let beta = common::normal_equations(&dm.rows, &dm.targets);
    let fitted = &dm.rows * beta;
    for (r, &(j, t)) in dm.index.iter().enumerate() {
        assert!((sc.e[(j, t)] - fitted[r]).abs() < 1e-8);
    }
    assert_eq!(sc.valid_from, 2);
    assert!(sc.e.column(1).iter().all(|v| v.is_nan()));
    for t in sc.valid_from..10 {
        for j in 0..16 {
            let nb = ds.graph.neighbors(j);
            let avg = nb.iter().map(|&k| sc.e[(k, t)]).sum::<f64>() / nb.len() as f64;
            assert!((sc.e_tilde[(j, t)] - avg).abs() < 1e-12);
        }
    }
}
