//! Posterior summaries, the percent-change effect scale and replicate
//! bias/coverage metrics.
//!
//! Quantiles use linear interpolation between order statistics
//! (`h = (n - 1) p`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::inference::{ModelVariant, PosteriorSamples};
use crate::scalar::Scalar;

/// Exposure scale used for reported effects.
pub const DEFAULT_EFFECT_SCALE: f64 = 50.0;

/// Expected percent change in cases for an `a`-unit change of the
/// intervention: `100 (exp(a delta) - 1)`.
pub fn effect_transform<S: Scalar>(delta: S, a: S) -> S {
    S::of(100.0) * (a * delta).exp_m1()
}

/// Interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalLevel {
    P90,
    P95,
}

impl IntervalLevel {
    pub fn percent(self) -> u32 {
        match self {
            Self::P90 => 90,
            Self::P95 => 95,
        }
    }
}

/// Marginal posterior summary of one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub interval90: Interval,
    pub interval95: Interval,
    /// The 95% interval excludes zero.
    pub significant: bool,
}

impl DrawSummary {
    pub fn from_draws(name: impl Into<String>, draws: &[f64]) -> Result<Self> {
        let name = name.into();
        if draws.len() < 2 {
            return invalid(format!("`{name}` needs at least 2 draws, got {}", draws.len()));
        }
        if draws.iter().any(|v| v.is_nan()) {
            return invalid(format!("`{name}` has NaN draws"));
        }
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let interval = |level: f64| Interval {
            lower: quantile_sorted(&sorted, (1.0 - level) / 2.0),
            upper: quantile_sorted(&sorted, (1.0 + level) / 2.0),
        };
        let interval95 = interval(0.95);
        Ok(Self {
            name,
            mean,
            median: quantile_sorted(&sorted, 0.5),
            sd,
            interval90: interval(0.90),
            interval95,
            significant: interval95.excludes_zero(),
        })
    }

    pub fn interval(&self, level: IntervalLevel) -> Interval {
        match level {
            IntervalLevel::P90 => self.interval90,
            IntervalLevel::P95 => self.interval95,
        }
    }
}

/// One causal effect on the coefficient and percent-change scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub coefficient: DrawSummary,
    /// Summary of the draw-wise transformed chain.
    pub percent: DrawSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub variant: ModelVariant,
    pub scale: f64,
    pub n_draws: usize,
    pub direct: EffectEstimate,
    pub spillover: EffectEstimate,
    /// Every regression coefficient, in model order.
    pub coefficients: Vec<DrawSummary>,
}

fn effect(name: &str, draws: &[f64], a: f64) -> Result<EffectEstimate> {
    let pct: Vec<f64> = draws.iter().map(|&d| effect_transform(d, a)).collect();
    Ok(EffectEstimate {
        coefficient: DrawSummary::from_draws(name, draws)?,
        percent: DrawSummary::from_draws(format!("{name} (%)"), &pct)?,
    })
}

/// Summarizes a chain with effects reported for an `a`-unit change.
pub fn summarize(samples: &PosteriorSamples, a: f64) -> Result<EffectSummary> {
    if samples.n_draws() < 2 {
        return invalid(format!("summaries need at least 2 retained draws, got {}", samples.n_draws()));
    }
    let d1 = samples.delta1();
    let d2 = samples.delta2();
    if d1.is_empty() || d2.is_empty() {
        return invalid("samples have no delta1/delta2 columns");
    }
    let coefficients = samples
        .coefficient_names()
        .iter()
        .map(|n| DrawSummary::from_draws(n.clone(), &samples.column(n).unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectSummary {
        variant: samples.manifest.variant,
        scale: a,
        n_draws: samples.n_draws(),
        direct: effect("delta1", &d1, a)?,
        spillover: effect("delta2", &d2, a)?,
        coefficients,
    })
}

/// Bias and interval coverage over replicates, both multiplied by 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBias {
    pub bias: f64,
    pub bias_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub replicates: usize,
}

/// Bias of the posterior median and coverage of the `level` interval.
/// With a single replicate the standard errors are `NaN`.
pub fn coverage_and_bias(summaries: &[DrawSummary], truth: f64, level: IntervalLevel) -> Result<CoverageBias> {
    if summaries.is_empty() {
        return invalid("no replicates to score");
    }
    let n = summaries.len() as f64;
    let err: Vec<f64> = summaries.iter().map(|s| s.median - truth).collect();
    let mean = err.iter().sum::<f64>() / n;
    let sd = (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let hits = summaries.iter().filter(|s| s.interval(level).contains(truth)).count() as f64;
    let c = hits / n;
    Ok(CoverageBias {
        bias: 100.0 * mean,
        bias_se: 100.0 * sd / n.sqrt(),
        coverage: 100.0 * c,
        coverage_se: if summaries.len() > 1 { 100.0 * (c * (1.0 - c) / n).sqrt() } else { f64::NAN },
        replicates: summaries.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Direct,
    Spillover,
}

/// One scenario/variant/effect cell of the study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: u32,
    pub variant: ModelVariant,
    pub effect: Effect,
    pub truth: f64,
    pub metrics90: CoverageBias,
    pub metrics95: CoverageBias,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub rows: Vec<MetricsRow>,
}

impl StudyMetrics {
    /// Sorts by scenario, then variant (Full, NoNugget, NoPS, NonSpatial),
    /// then effect.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| (a.scenario, a.variant, a.effect).cmp(&(b.scenario, b.variant, b.effect)));
    }

    pub fn get(&self, scenario: u32, variant: ModelVariant, effect: Effect) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.variant == variant && r.effect == effect)
    }

    fn table_keys(&self) -> Vec<(u32, ModelVariant)> {
        let mut keys: Vec<(u32, ModelVariant)> = self.rows.iter().map(|r| (r.scenario, r.variant)).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// One line per scenario and variant with direct and spillover bias and
    /// 90% coverage, standard errors alongside.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,variant,replicates,direct_bias,direct_bias_se,direct_coverage90,direct_coverage90_se,direct_coverage95,\
spillover_bias,spillover_bias_se,spillover_coverage90,spillover_coverage90_se,spillover_coverage95\n",
        );
        for (s, v) in self.table_keys() {
            let _ = write!(out, "{s},{}", v.key());
            let d = self.get(s, v, Effect::Direct);
            let _ = write!(out, ",{}", d.or(self.get(s, v, Effect::Spillover)).map_or(0, |r| r.metrics90.replicates));
            for e in [Effect::Direct, Effect::Spillover] {
                match self.get(s, v, e) {
                    Some(r) => {
                        let m = r.metrics90;
                        let _ = write!(
                            out,
                            ",{:.4},{:.4},{:.2},{:.2},{:.2}",
                            m.bias, m.bias_se, m.coverage, m.coverage_se, r.metrics95.coverage
                        );
                    }
                    None => out.push_str(",,,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned markdown table: `bias (SE)` and `coverage (SE)` per effect.
    pub fn to_markdown(&self) -> String {
        let header = ["Scenario", "Model", "Direct bias", "Direct coverage", "Spillover bias", "Spillover coverage"];
        let mut rows = Vec::new();
        for (s, v) in self.table_keys() {
            let mut row = vec![s.to_string(), v.label().to_string()];
            for e in [Effect::Direct, Effect::Spillover] {
                match self.get(s, v, e) {
                    Some(r) => {
                        let m = r.metrics90;
                        row.push(format!("{:.2} ({:.2})", m.bias, m.bias_se));
                        row.push(format!("{:.0} ({:.0})", m.coverage, m.coverage_se));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            rows.push(row);
        }
        markdown_table(&header, &rows)
    }
}

/// Renders an aligned markdown table.
pub fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, " {c:<w$} |");
        }
        s.push('\n');
        s
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect()));
    for r in rows {
        let mut cells = r.clone();
        cells.resize(ncol, String::new());
        out.push_str(&line(cells));
    }
    out
}

fn fmt_interval(s: &DrawSummary, digits: usize) -> String {
    format!(
        "{:.d$} ({:.d$}, {:.d$})",
        s.median,
        s.interval95.lower,
        s.interval95.upper,
        d = digits
    )
}

impl EffectSummary {
    /// Effects on the percent scale: median and 95% interval per variant.
    pub fn effects_markdown(summaries: &[EffectSummary]) -> String {
        let header = ["Model", "Direct (%)", "Spillover (%)"];
        let rows: Vec<Vec<String>> = summaries
            .iter()
            .map(|s| {
                let flag = |e: &EffectEstimate| if e.percent.significant { "*" } else { "" };
                vec![
                    s.variant.label().to_string(),
                    format!("{}{}", fmt_interval(&s.direct.percent, 1), flag(&s.direct)),
                    format!("{}{}", fmt_interval(&s.spillover.percent, 1), flag(&s.spillover)),
                ]
            })
            .collect();
        markdown_table(&header, &rows)
    }

    /// Coefficient table: posterior median and 95% interval.
    pub fn coefficients_markdown(&self) -> String {
        let header = ["Coefficient", "Median", "95% interval", "Significant"];
        let rows: Vec<Vec<String>> = self
            .coefficients
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    format!("{:.4}", c.median),
                    format!("({:.4}, {:.4})", c.interval95.lower, c.interval95.upper),
                    if c.significant { "yes".into() } else { "no".into() },
                ]
            })
            .collect();
        markdown_table(&header, &rows)
    }

    pub fn coefficients_csv(&self) -> String {
        let mut out = String::from("name,mean,median,sd,lower90,upper90,lower95,upper95,significant\n");
        for c in &self.coefficients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.name,
                c.mean,
                c.median,
                c.sd,
                c.interval90.lower,
                c.interval90.upper,
                c.interval95.lower,
                c.interval95.upper,
                c.significant
            );
        }
        out
    }

    /// Full report: effects on both scales followed by the coefficient table.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("Model: {} ({} draws, effects per {} units)\n\n", self.variant.label(), self.n_draws, self.scale);
        let header = ["Effect", "Coefficient", "Percent change"];
        let rows: Vec<Vec<String>> = [("Direct", &self.direct), ("Spillover", &self.spillover)]
            .iter()
            .map(|(n, e)| vec![n.to_string(), fmt_interval(&e.coefficient, 4), fmt_interval(&e.percent, 2)])
            .collect();
        out.push_str(&markdown_table(&header, &rows));
        out.push('\n');
        out.push_str(&self.coefficients_markdown());
        out
    }
}
