mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spillover::graph::IsolatedPolicy;
use spillover::inference::{fit, fit_problem, fit_problem_from, FitConfig, FitProblem, ModelVariant};
use spillover::propensity::{estimate_scores, IndirectMethod, PropensityDesign};
use spillover::sir::{simulate_scenario, ScenarioConfig};

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[test]
fn interval_for_delta1_is_calibrated_on_model_data() {
    let mut covered = 0;
    for rep in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let ds = common::model_consistent_panel(&mut rng, 4, 4, 14, 0.5);
        let sc = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
        let cfg = FitConfig { iterations: 3000, burn_in: 1000, latent_thin: 0, seed: rep, ..Default::default() };
        let s = fit(&ds, Some(&sc), ModelVariant::NoNugget, &cfg).unwrap();
        let mut d = s.delta1();
        d.sort_by(f64::total_cmp);
        let (lo, hi) = (quantile(&d, 0.025), quantile(&d, 0.975));
        covered += (lo <= 0.5 && 0.5 <= hi) as usize;
    }
    assert!(covered >= 18, "95% interval covered 0.5 in {covered} of 20 replicates");
}

#[test]
fn chain_started_at_a_posterior_draw_does_not_drift() {
    let ds = simulate_scenario(&ScenarioConfig { rows: 5, cols: 5, n_times: 16, seed: 77, ..Default::default() }).unwrap();
    let sc = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
    let warm = FitConfig { iterations: 3000, burn_in: 2000, latent_thin: 0, seed: 1, ..Default::default() };
    let fp = FitProblem::from_config(&ds, Some(&sc), ModelVariant::Full, &warm).unwrap();
    let first = fit_problem(&fp, &warm).unwrap();
    let start = first.final_params.clone().unwrap();
    let cont = FitConfig { iterations: 1000, burn_in: 0, adapt: false, seed: 2, ..warm };
    let s = fit_problem_from(&fp, &cont, Some(&start)).unwrap();

    let seg = first.delta1();
    let n = seg.len() as f64;
    let mean = seg.iter().sum::<f64>() / n;
    let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let batches = 20;
    let size = seg.len() / batches;
    let bm: Vec<f64> = (0..batches).map(|b| seg[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let bvar = bm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    let mcse = (bvar / batches as f64).sqrt().max((var / n).sqrt());

    let later = s.delta1();
    let later_mean = later.iter().sum::<f64>() / later.len() as f64;
    assert!((later_mean - mean).abs() <= 3.0 * mcse.max((var / later.len() as f64).sqrt()), "{later_mean} vs {mean} (mcse {mcse})");
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let ds = simulate_scenario(&ScenarioConfig { rows: 3, cols: 3, n_times: 10, seed: 3, ..Default::default() }).unwrap();
    let sc = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
    let cfg = FitConfig { iterations: 400, burn_in: 100, latent_thin: 100, seed: 12, ..Default::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        fit(&ds, Some(&sc), ModelVariant::Full, &cfg).unwrap().write_dir(d.path()).unwrap();
    }
    for f in ["samples.csv", "manifest.json", "latent.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let other = fit(&ds, Some(&sc), ModelVariant::Full, &FitConfig { seed: 13, ..cfg }).unwrap();
    assert_ne!(other.samples_csv(), std::fs::read_to_string(dirs[0].path().join("samples.csv")).unwrap());
}

#[test]
fn one_retained_draw_and_bounded_acceptance() {
    let ds = simulate_scenario(&ScenarioConfig { rows: 4, cols: 4, n_times: 12, seed: 8, ..Default::default() }).unwrap();
    let sc = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
    let one = fit(&ds, Some(&sc), ModelVariant::NoPs, &FitConfig { iterations: 11, burn_in: 10, ..Default::default() }).unwrap();
    assert_eq!(one.n_draws(), 1);

    for variant in ModelVariant::ALL {
        let cfg = FitConfig { iterations: 3000, burn_in: 1500, latent_thin: 0, ..Default::default() };
        let s = fit(&ds, Some(&sc), variant, &cfg).unwrap();
        assert_eq!(s.n_draws(), cfg.n_retained());
        for block in ["regression", "rho_s", "rho_t"] {
            if let Some(&rate) = s.manifest.acceptance.get(block) {
                assert!((0.1..=0.6).contains(&rate), "{variant} {block}: {rate}");
            }
        }
    }
}
