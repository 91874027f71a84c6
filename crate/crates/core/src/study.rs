//! Scenario catalog and the replicate/variant harness of the simulation
//! study.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::effects::{coverage_and_bias, summarize, DrawSummary, Effect, EffectSummary, IntervalLevel, MetricsRow, StudyMetrics, DEFAULT_EFFECT_SCALE};
use crate::error::{invalid, Error, Result};
use crate::inference::{fit, FitConfig, ModelVariant};
use crate::propensity::{estimate_scores, IndirectMethod, PropensityDesign};
use crate::sir::{simulate_scenario, ScenarioConfig};

/// Scenario ids `1..=6` with their `(rho_s, rho_t, rho_x, phi)`.
pub const SCENARIOS: [(u32, &str, [f64; 4]); 6] = [
    (1, "base", [0.9, 0.5, 0.5, 0.4]),
    (2, "strong spatial intervention", [0.99, 0.5, 0.5, 0.4]),
    (3, "strong temporal intervention", [0.3, 0.9, 0.5, 0.4]),
    (4, "strong spatiotemporal intervention", [0.9, 0.9, 0.5, 0.4]),
    (5, "strong confounding", [0.9, 0.5, 0.9, 0.4]),
    (6, "weak spatial transmission", [0.9, 0.5, 0.5, 0.2]),
];

/// Base scenario with the overrides of scenario `id`.
pub fn scenario(id: u32) -> Result<ScenarioConfig> {
    let (_, _, [rho_s, rho_t, rho_x, phi]) = SCENARIOS
        .iter()
        .find(|s| s.0 == id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {id}; expected 1 to 6")))?;
    Ok(ScenarioConfig {
        rho_s,
        rho_t,
        rho_x,
        phi,
        ..ScenarioConfig::default()
    })
}

pub fn scenario_name(id: u32) -> Option<&'static str> {
    SCENARIOS.iter().find(|s| s.0 == id).map(|s| s.1)
}

/// Seed of replicate `replicate` of scenario `scenario`.
pub fn replicate_seed(base: u64, scenario: u32, replicate: u32) -> u64 {
    base.wrapping_add((scenario as u64) << 32).wrapping_add(replicate as u64)
}

/// Seed of the chain fitting `variant` to one replicate.
pub fn fit_seed(replicate_seed: u64, variant: ModelVariant) -> u64 {
    let k = ModelVariant::ALL.iter().position(|v| *v == variant).unwrap_or(0) as u64;
    let mut z = replicate_seed ^ (k + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Desk-scale overrides of grid size, horizon and chain length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleOverrides {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub n_times: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyPlan {
    pub scenarios: Vec<u32>,
    pub replicates: u32,
    pub variants: Vec<ModelVariant>,
    pub base_seed: u64,
    pub fit: FitConfig,
    pub scale: ScaleOverrides,
    pub propensity: PropensityDesign,
    pub indirect: IndirectMethod,
    pub effect_scale: f64,
    pub output_dir: PathBuf,
    /// Keep posterior draws of every run next to its manifest.
    pub keep_samples: bool,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for StudyPlan {
    fn default() -> Self {
        Self {
            scenarios: SCENARIOS.iter().map(|s| s.0).collect(),
            replicates: 100,
            variants: ModelVariant::ALL.to_vec(),
            base_seed: 2020,
            fit: FitConfig { latent_thin: 0, ..FitConfig::default() },
            scale: ScaleOverrides::default(),
            propensity: PropensityDesign::simulation(),
            indirect: IndirectMethod::NeighborAverage,
            effect_scale: DEFAULT_EFFECT_SCALE,
            output_dir: PathBuf::from("study-output"),
            keep_samples: false,
            threads: 0,
        }
    }
}

impl StudyPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            context: "study plan".into(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return invalid("a study needs at least one replicate");
        }
        if self.scenarios.is_empty() || self.variants.is_empty() {
            return invalid("a study needs at least one scenario and one variant");
        }
        for &s in &self.scenarios {
            scenario(s)?;
        }
        self.fit_config(0).validate()
    }

    /// Scenario `id` after scale overrides, seeded for `replicate`.
    pub fn scenario_config(&self, id: u32, replicate: u32) -> Result<ScenarioConfig> {
        let mut c = scenario(id)?;
        if let Some(r) = self.scale.rows {
            c.rows = r;
        }
        if let Some(r) = self.scale.cols {
            c.cols = r;
        }
        if let Some(t) = self.scale.n_times {
            c.n_times = t;
        }
        c.seed = replicate_seed(self.base_seed, id, replicate);
        Ok(c)
    }

    pub fn fit_config(&self, seed: u64) -> FitConfig {
        let mut f = self.fit.clone();
        if let Some(i) = self.scale.iterations {
            f.iterations = i;
        }
        if let Some(b) = self.scale.burn_in {
            f.burn_in = b;
        }
        f.seed = seed;
        f
    }
}

/// Result of one (scenario, replicate, variant) fit as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub scenario: u32,
    pub replicate: u32,
    pub variant: ModelVariant,
    pub scenario_config: ScenarioConfig,
    pub fit_config: FitConfig,
    pub summary: EffectSummary,
    pub acceptance: std::collections::BTreeMap<String, f64>,
    pub clamped_iterations: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub scenario: u32,
    pub replicate: u32,
    pub variant: Option<ModelVariant>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub metrics: StudyMetrics,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Runs loaded from existing manifests instead of refitted.
    pub reused: usize,
}

impl StudyOutcome {
    pub fn failed_fraction(&self) -> f64 {
        let total = self.records.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    scenario: &'a ScenarioConfig,
    fit: &'a FitConfig,
    variant: ModelVariant,
    propensity: &'a PropensityDesign,
    indirect: IndirectMethod,
    effect_scale: f64,
    version: &'a str,
}

fn run_key(plan: &StudyPlan, sc: &ScenarioConfig, fc: &FitConfig, variant: ModelVariant) -> Result<String> {
    let material = KeyMaterial {
        scenario: sc,
        fit: fc,
        variant,
        propensity: &plan.propensity,
        indirect: plan.indirect,
        effect_scale: plan.effect_scale,
        version: env!("CARGO_PKG_VERSION"),
    };
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&material)?)))
}

pub fn run_dir(root: &Path, scenario: u32, replicate: u32, variant: ModelVariant) -> PathBuf {
    root.join("runs")
        .join(format!("scenario-{scenario}"))
        .join(format!("replicate-{replicate:04}"))
        .join(variant.key())
}

fn load_record(dir: &Path, key: &str) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join("run.json")).ok()?;
    let rec: RunRecord = serde_json::from_str(&text).ok()?;
    (rec.key == key).then_some(rec)
}

/// Simulates replicate `replicate` of scenario `id`, estimates propensity
/// scores and fits each requested variant. Completed runs with a matching
/// manifest under `plan.output_dir` are reused.
pub fn run_replicate(plan: &StudyPlan, id: u32, replicate: u32) -> (Vec<(RunRecord, bool)>, Vec<RunFailure>) {
    let mut done = Vec::new();
    let mut failures = Vec::new();
    let fail = |variant, e: Error| RunFailure {
        scenario: id,
        replicate,
        variant,
        message: e.to_string(),
    };
    let sc = match plan.scenario_config(id, replicate) {
        Ok(sc) => sc,
        Err(e) => return (done, vec![fail(None, e)]),
    };
    let mut pending = Vec::new();
    for &variant in &plan.variants {
        let fc = plan.fit_config(fit_seed(sc.seed, variant));
        match run_key(plan, &sc, &fc, variant) {
            Ok(key) => {
                let dir = run_dir(&plan.output_dir, id, replicate, variant);
                match load_record(&dir, &key) {
                    Some(rec) => done.push((rec, true)),
                    None => pending.push((variant, fc, key, dir)),
                }
            }
            Err(e) => failures.push(fail(Some(variant), e)),
        }
    }
    if pending.is_empty() {
        return (done, failures);
    }
    let prepared = simulate_scenario(&sc).and_then(|ds| {
        let scores = estimate_scores(&ds, &plan.propensity, plan.indirect, plan.fit.isolated_policy)?;
        Ok((ds, scores))
    });
    let (ds, scores) = match prepared {
        Ok(p) => p,
        Err(e) => {
            for (variant, ..) in pending {
                failures.push(fail(Some(variant), Error::Internal(format!("data preparation failed: {e}"))));
            }
            return (done, failures);
        }
    };
    for (variant, fc, key, dir) in pending {
        let result = fit(&ds, Some(&scores), variant, &fc).and_then(|samples| {
            let summary = summarize(&samples, plan.effect_scale)?;
            let rec = RunRecord {
                key,
                scenario: id,
                replicate,
                variant,
                scenario_config: sc.clone(),
                fit_config: fc,
                summary,
                acceptance: samples.manifest.acceptance.clone(),
                clamped_iterations: samples.manifest.clamped_iterations,
                version: env!("CARGO_PKG_VERSION").to_string(),
            };
            fs::create_dir_all(&dir)?;
            if plan.keep_samples {
                samples.write_dir(&dir)?;
            }
            fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
            Ok(rec)
        });
        match result {
            Ok(rec) => done.push((rec, false)),
            Err(e) => {
                warn!("scenario {id} replicate {replicate} {variant} failed: {e}");
                failures.push(fail(Some(variant), e));
            }
        }
    }
    (done, failures)
}

/// Bias and coverage per scenario, variant and effect.
pub fn aggregate(records: &[RunRecord]) -> Result<StudyMetrics> {
    let mut keys: Vec<(u32, ModelVariant)> = records.iter().map(|r| (r.scenario, r.variant)).collect();
    keys.sort();
    keys.dedup();
    let mut metrics = StudyMetrics::default();
    for (s, v) in keys {
        let group: Vec<&RunRecord> = records.iter().filter(|r| r.scenario == s && r.variant == v).collect();
        let beta = &group[0].scenario_config.beta;
        for (effect, truth) in [(Effect::Direct, beta.delta1), (Effect::Spillover, beta.delta2)] {
            let sums: Vec<DrawSummary> = group
                .iter()
                .map(|r| match effect {
                    Effect::Direct => r.summary.direct.coefficient.clone(),
                    Effect::Spillover => r.summary.spillover.coefficient.clone(),
                })
                .collect();
            metrics.rows.push(MetricsRow {
                scenario: s,
                variant: v,
                effect,
                truth,
                metrics90: coverage_and_bias(&sums, truth, IntervalLevel::P90)?,
                metrics95: coverage_and_bias(&sums, truth, IntervalLevel::P95)?,
            });
        }
    }
    metrics.sort();
    Ok(metrics)
}

/// Runs every (scenario, replicate) job on a pool of worker threads and
/// aggregates the completed fits.
pub fn run_study(plan: &StudyPlan) -> Result<StudyOutcome> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir)?;
    fs::write(plan.output_dir.join("plan.toml"), toml::to_string(plan).map_err(|e| Error::Internal(e.to_string()))?)?;
    let jobs: Vec<(u32, u32)> = plan
        .scenarios
        .iter()
        .flat_map(|&s| (0..plan.replicates).map(move |r| (s, r)))
        .collect();
    let threads = if plan.threads > 0 {
        plan.threads
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
    .min(jobs.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(Vec<(RunRecord, bool)>, Vec<RunFailure>)>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(s, r)) = jobs.get(i) else { break };
                let out = run_replicate(plan, s, r);
                info!("scenario {s} replicate {r}: {} runs, {} failures", out.0.len(), out.1.len());
                results.lock().expect("result lock")[i] = Some(out);
            });
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut reused = 0;
    for (recs, fails) in results.into_inner().expect("result lock").into_iter().flatten() {
        for (rec, was_reused) in recs {
            reused += was_reused as usize;
            records.push(rec);
        }
        failures.extend(fails);
    }
    let metrics = if records.is_empty() { StudyMetrics::default() } else { aggregate(&records)? };
    if !failures.is_empty() {
        fs::write(plan.output_dir.join("failures.json"), serde_json::to_string_pretty(&failures)? + "\n")?;
    }
    Ok(StudyOutcome {
        metrics,
        records,
        failures,
        reused,
    })
}

/// Writes `metrics.csv`, `metrics.md` and `metrics.json` into `dir`.
pub fn emit_report(metrics: &StudyMetrics, dir: &Path) -> Result<()> {
    if metrics.rows.is_empty() {
        return invalid("no metrics to report");
    }
    let mut sorted = metrics.clone();
    sorted.sort();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), sorted.to_csv())?;
    fs::write(dir.join("metrics.md"), sorted.to_markdown())?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&sorted)? + "\n")?;
    Ok(())
}
