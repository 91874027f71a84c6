use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use spillover::dataio::{self, IngestPaths, WeekCalendar};
use spillover::effects::{summarize, EffectSummary, DEFAULT_EFFECT_SCALE};
use spillover::inference::{fit, FitConfig, ModelVariant, PosteriorSamples};
use spillover::panel::PanelDataset;
use spillover::propensity::{estimate_scores, IndirectMethod, PropensityDesign, PropensityScores};
use spillover::sir::{simulate_scenario, ScenarioConfig};
use spillover::study::{emit_report, run_study, StudyPlan};

/// Share of failed study runs above which `study` exits with an error.
const MAX_FAILED_FRACTION: f64 = 0.05;

#[derive(Parser)]
#[command(name = "spillover", version, about = "Direct and spillover intervention effects on epidemic spread")]
struct Cli {
    /// Log level used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic panel from a scenario file.
    Simulate {
        /// Scenario TOML; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Catalog scenario 1-6, used instead of a file.
        #[arg(long, conflicts_with = "config")]
        scenario: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model variant to a panel directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: ModelVariant,
        /// Fit settings TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `simulation`, `application` or a TOML file with `terms = [...]`.
        #[arg(long, default_value = "simulation")]
        design: String,
        #[arg(long, value_enum, default_value_t = Indirect::NeighborAverage)]
        indirect: Indirect,
        /// Read `e.csv`/`e_tilde.csv` from this directory instead of estimating them.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a replicated simulation study and write the metrics tables.
    Study {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize one or more fitted runs.
    Summarize {
        /// Run directories written by `fit`.
        #[arg(long = "samples", required = true, num_args = 1..)]
        samples: Vec<PathBuf>,
        /// Units of change the percent effects refer to.
        #[arg(long, default_value_t = DEFAULT_EFFECT_SCALE)]
        scale: f64,
        /// Directory for `summary.md`, `summary.json` and `coefficients.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a weekly panel from county-level daily files.
    Ingest {
        /// Directory with centroids, adjacency, cases, mobility and covariates files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "2020-03-06")]
        start_date: chrono::NaiveDate,
        #[arg(long, default_value = "2020-10-08")]
        end_date: chrono::NaiveDate,
        /// Any date on which a week starts.
        #[arg(long, default_value = "2020-03-06")]
        week_anchor: chrono::NaiveDate,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Indirect {
    NeighborAverage,
    Regression,
}

impl From<Indirect> for IndirectMethod {
    fn from(i: Indirect) -> Self {
        match i {
            Indirect::NeighborAverage => IndirectMethod::NeighborAverage,
            Indirect::Regression => IndirectMethod::Regression,
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn design_from(spec: &str) -> Result<PropensityDesign> {
    Ok(match spec {
        "simulation" => PropensityDesign::simulation(),
        "application" => PropensityDesign::application(),
        path => read_toml(Path::new(path))?,
    })
}

fn simulate(config: Option<PathBuf>, scenario: Option<u32>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: ScenarioConfig = match (config, scenario) {
        (Some(p), _) => read_toml(&p)?,
        (None, Some(id)) => spillover::study::scenario(id)?,
        (None, None) => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = simulate_scenario(&cfg)?;
    ds.write_dir(out)?;
    fs::write(out.join("scenario.toml"), toml::to_string(&cfg)?)?;
    info!("wrote {} regions x {} times to {}", ds.n_regions(), ds.n_times(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit_cmd(
    data: &Path,
    out: &Path,
    variant: ModelVariant,
    config: Option<PathBuf>,
    design: &str,
    indirect: Indirect,
    scores: Option<PathBuf>,
    lag: Option<usize>,
    iterations: Option<usize>,
    burn_in: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let ds = PanelDataset::read_dir(data)?;
    let design_spec = design_from(design)?;
    let mut cfg = match config {
        Some(p) => read_toml::<FitConfig>(&p)?,
        None if design == "application" => dataio::application_config(&design_spec, lag.unwrap_or(2), variant),
        None => FitConfig::default(),
    };
    if let Some(l) = lag {
        cfg.lag = l;
        if design == "application" {
            cfg.window_start = cfg.window_start.max(l + design_spec.valid_from());
        }
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(n) = burn_in {
        cfg.burn_in = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sc = if !variant.uses_scores() {
        None
    } else if let Some(dir) = scores {
        Some(PropensityScores::read_dir(&dir)?)
    } else {
        Some(estimate_scores(&ds, &design_spec, indirect.into(), cfg.isolated_policy)?)
    };
    let samples = fit(&ds, sc.as_ref(), variant, &cfg)?;
    samples.write_dir(out)?;
    if let Some(sc) = &sc {
        sc.write_dir(out)?;
    }
    info!(
        "{} draws of {} written to {}; acceptance {:?}",
        samples.n_draws(),
        variant.label(),
        out.display(),
        samples.manifest.acceptance
    );
    if samples.manifest.clamped_iterations > 0 {
        warn!("{} iterations hit the rate exponent clamp", samples.manifest.clamped_iterations);
    }
    Ok(())
}

fn study(plan: &Path, output_dir: Option<PathBuf>, threads: Option<usize>) -> Result<bool> {
    let text = fs::read_to_string(plan).with_context(|| format!("reading {}", plan.display()))?;
    let mut plan = StudyPlan::from_toml(&text)?;
    if let Some(d) = output_dir {
        plan.output_dir = d;
    }
    if let Some(t) = threads {
        plan.threads = t;
    }
    let outcome = run_study(&plan)?;
    if !outcome.metrics.rows.is_empty() {
        emit_report(&outcome.metrics, &plan.output_dir)?;
        println!("{}", outcome.metrics.to_markdown());
    }
    info!(
        "{} runs ({} reused), {} failures",
        outcome.records.len(),
        outcome.reused,
        outcome.failures.len()
    );
    let frac = outcome.failed_fraction();
    if frac > MAX_FAILED_FRACTION {
        warn!("{:.1}% of runs failed; see failures.json", 100.0 * frac);
        return Ok(false);
    }
    Ok(true)
}

fn summarize_cmd(dirs: &[PathBuf], scale: f64, out: Option<PathBuf>) -> Result<()> {
    let mut summaries = Vec::new();
    for d in dirs {
        let s = PosteriorSamples::read_dir(d).with_context(|| format!("reading {}", d.display()))?;
        summaries.push(summarize(&s, scale)?);
    }
    let mut report = String::new();
    if summaries.len() > 1 {
        report.push_str(&EffectSummary::effects_markdown(&summaries));
        report.push('\n');
    }
    for s in &summaries {
        report.push_str(&s.to_markdown());
        report.push('\n');
    }
    print!("{report}");
    if let Some(out) = out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("summary.md"), &report)?;
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
        if let [single] = summaries.as_slice() {
            fs::write(out.join("coefficients.csv"), single.coefficients_csv())?;
        } else {
            for (s, d) in summaries.iter().zip(dirs) {
                let name = d.file_name().map_or_else(|| s.variant.key().to_string(), |n| n.to_string_lossy().into_owned());
                fs::write(out.join(format!("coefficients-{name}.csv")), s.coefficients_csv())?;
            }
        }
    }
    Ok(())
}

fn ingest(input: &Path, out: &Path, calendar: WeekCalendar) -> Result<()> {
    if calendar.end < calendar.start {
        bail!("end date {} precedes start date {}", calendar.end, calendar.start);
    }
    let (ds, report) = dataio::ingest(&IngestPaths::in_dir(input), &calendar)?;
    ds.write_dir(out)?;
    fs::write(out.join("ingest.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    info!(
        "{} counties x {} weeks; {} mobility cells imputed, {} case decreases clamped",
        ds.n_regions(),
        ds.n_times(),
        report.imputation.filled,
        report.case_clamps
    );
    if !report.imputation.unfilled.is_empty() {
        warn!("{} mobility cells had no donor", report.imputation.unfilled.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { config, scenario, seed, out } => simulate(config, scenario, seed, &out)?,
        Command::Fit {
            data,
            out,
            variant,
            config,
            design,
            indirect,
            scores,
            lag,
            iterations,
            burn_in,
            seed,
        } => fit_cmd(&data, &out, variant, config, &design, indirect, scores, lag, iterations, burn_in, seed)?,
        Command::Study { plan, output_dir, threads } => return study(&plan, output_dir, threads),
        Command::Summarize { samples, scale, out } => summarize_cmd(&samples, scale, out)?,
        Command::Ingest {
            input,
            out,
            start_date,
            end_date,
            week_anchor,
        } => ingest(
            &input,
            &out,
            WeekCalendar {
                anchor: week_anchor,
                start: start_date,
                end: end_date,
            },
        )?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn named_designs_resolve() {
        assert_eq!(design_from("simulation").unwrap(), PropensityDesign::simulation());
        assert_eq!(design_from("application").unwrap(), PropensityDesign::application());
        assert!(design_from("/nonexistent/design.toml").is_err());
    }

    #[test]
    fn ingest_flags_parse_dates() {
        let cli = Cli::try_parse_from([
            "spillover",
            "ingest",
            "--input",
            "in",
            "--out",
            "out",
            "--start-date",
            "2020-03-13",
            "--end-date",
            "2020-06-01",
            "--week-anchor",
            "2020-03-06",
        ])
        .unwrap();
        match cli.command {
            Command::Ingest { start_date, week_anchor, .. } => {
                assert_eq!(start_date.to_string(), "2020-03-13");
                assert_eq!(week_anchor.to_string(), "2020-03-06");
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["spillover", "ingest", "--input", "a", "--out", "b", "--start-date", "March"]).is_err());
    }
}
