//! County panel ingestion: daily mobility and case files to a weekly
//! [`PanelDataset`].
//!
//! Input files (comma separated, header row required):
//!
//! | file | columns |
//! |------|---------|
//! | `centroids.csv` | `county,lat,lon` (defines region order) |
//! | `adjacency.csv` | `county_a,county_b` |
//! | `cases.csv` | `county,date,cumulative` |
//! | `mobility.csv` | `county,date,retail_recreation,grocery_pharmacy,transit,workplace,residential` |
//! | `covariates.csv` | `county,population,<static covariates...>` |
//! | `daily_covariates.csv` (optional) | `county,date,<time-varying covariates...>` |
//!
//! Dates are `YYYY-MM-DD`; empty mobility cells are missing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::graph::{AdjacencyGraph, IsolatedPolicy};
use crate::inference::{FitConfig, ModelVariant};
use crate::panel::PanelDataset;
use crate::propensity::PropensityDesign;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityCategory {
    RetailRecreation,
    GroceryPharmacy,
    Transit,
    Workplace,
    Residential,
}

impl MobilityCategory {
    pub const ALL: [MobilityCategory; 5] = [
        Self::RetailRecreation,
        Self::GroceryPharmacy,
        Self::Transit,
        Self::Workplace,
        Self::Residential,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Self::RetailRecreation => "retail_recreation",
            Self::GroceryPharmacy => "grocery_pharmacy",
            Self::Transit => "transit",
            Self::Workplace => "workplace",
            Self::Residential => "residential",
        }
    }

    /// Residential time rises when mobility falls, so it enters negated.
    pub fn sign(self) -> f64 {
        if self == Self::Residential {
            -1.0
        } else {
            1.0
        }
    }
}

/// Daily percent-change-from-baseline values per county, indexed
/// `[county][day][category]` in [`MobilityCategory::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityPanel {
    pub counties: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<Vec<[Option<f64>; 5]>>,
    /// `(lat, lon)` in degrees.
    pub centroids: Vec<(f64, f64)>,
}

/// Signed mean over the available categories.
pub fn aggregate_row(values: &[Option<f64>; 5]) -> Option<f64> {
    let (sum, n) = MobilityCategory::ALL
        .iter()
        .zip(values)
        .filter_map(|(c, v)| v.map(|v| c.sign() * v))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Intervention value per county and day, `None` where no category is present.
pub fn aggregate_mobility(panel: &MobilityPanel) -> Vec<Vec<Option<f64>>> {
    panel
        .values
        .iter()
        .map(|days| days.iter().map(aggregate_row).collect())
        .collect()
}

/// Haversine distance in kilometres between `(lat, lon)` points in degrees.
pub fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Normalized inverse-distance weights. Zero distances are replaced by the
/// smallest positive distance; if every distance is zero the weights are equal.
/// Returns the weights and the number of replaced distances.
pub fn donor_weights(distances: &[f64]) -> (Vec<f64>, usize) {
    let min_pos = distances.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    let zero = distances.iter().filter(|&&d| !(d > 0.0)).count();
    let raw: Vec<f64> = if min_pos.is_finite() {
        distances.iter().map(|&d| 1.0 / if d > 0.0 { d } else { min_pos }).collect()
    } else {
        vec![1.0; distances.len()]
    };
    let total: f64 = raw.iter().sum();
    (raw.iter().map(|w| w / total).collect(), zero)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub filled: usize,
    /// `(county, day)` cells without any donor.
    pub unfilled: Vec<(usize, usize)>,
    /// Donor pairs at zero distance.
    pub zero_distance: usize,
}

/// Fills missing cells from first- and second-degree neighbors observed on
/// the same day, weighted by inverse great-circle distance. Only originally
/// observed values act as donors.
pub fn impute_missing(
    values: &[Vec<Option<f64>>],
    graph: &AdjacencyGraph,
    centroids: &[(f64, f64)],
) -> Result<(Vec<Vec<Option<f64>>>, ImputationReport)> {
    let n = graph.n_nodes();
    if values.len() != n || centroids.len() != n {
        return Err(Error::Dimension(format!(
            "{} value rows and {} centroids for {n} counties",
            values.len(),
            centroids.len()
        )));
    }
    let mut out = values.to_vec();
    let mut report = ImputationReport::default();
    for j in 0..n {
        let mut donors: Vec<usize> = graph.neighbors(j).to_vec();
        donors.extend(graph.second_degree_neighbors(j));
        let dist: Vec<f64> = donors.iter().map(|&k| great_circle_km(centroids[j], centroids[k])).collect();
        for (day, cell) in values[j].iter().enumerate() {
            if cell.is_some() {
                continue;
            }
            let avail: Vec<(f64, f64)> = donors
                .iter()
                .zip(&dist)
                .filter_map(|(&k, &d)| values[k].get(day).copied().flatten().map(|v| (v, d)))
                .collect();
            if avail.is_empty() {
                report.unfilled.push((j, day));
                continue;
            }
            let (w, zero) = donor_weights(&avail.iter().map(|a| a.1).collect::<Vec<_>>());
            if zero > 0 {
                warn!("county {j}: {zero} donor(s) at zero distance on day {day}");
                report.zero_distance += zero;
            }
            let base = avail[0].0;
            out[j][day] = Some(base + avail.iter().zip(&w).map(|((v, _), w)| (v - base) * w).sum::<f64>());
            report.filled += 1;
        }
    }
    Ok((out, report))
}

/// New cases from a cumulative series: `new[i] = max(0, c[i+1] - max(c[..=i]))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewCases {
    pub new: Vec<f64>,
    /// Number of decreases in the cumulative series.
    pub clamps: usize,
    /// Total size of those decreases.
    pub clamped_total: f64,
}

pub fn cumulative_to_new(cumulative: &[f64]) -> NewCases {
    let mut new = Vec::with_capacity(cumulative.len().saturating_sub(1));
    let mut clamps = 0;
    let mut clamped_total = 0.0;
    let Some(&first) = cumulative.first() else {
        return NewCases { new, clamps, clamped_total };
    };
    let mut high = first;
    for w in cumulative.windows(2) {
        if w[1] < w[0] {
            clamps += 1;
            clamped_total += w[0] - w[1];
        }
        new.push((w[1] - high).max(0.0));
        high = high.max(w[1]);
    }
    NewCases { new, clamps, clamped_total }
}

/// Seven-day weeks starting on `anchor + 7k`; only weeks lying entirely in
/// `[start, end]` are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekCalendar {
    pub anchor: NaiveDate,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for WeekCalendar {
    fn default() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2020, m, day).expect("valid date");
        Self {
            anchor: d(3, 6),
            start: d(3, 6),
            end: d(10, 8),
        }
    }
}

impl WeekCalendar {
    pub fn week_starts(&self) -> Vec<NaiveDate> {
        let offset = (self.start - self.anchor).num_days().rem_euclid(7);
        let mut first = self.start;
        if offset != 0 {
            first = first + Days::new((7 - offset) as u64);
        }
        let mut out = Vec::new();
        let mut w = first;
        while w + Days::new(6) <= self.end {
            out.push(w);
            w = w + Days::new(7);
        }
        out
    }

    /// Week index of `date`, if it falls in a counted week.
    pub fn week_of(&self, date: NaiveDate, starts: &[NaiveDate]) -> Option<usize> {
        let first = *starts.first()?;
        if date < first {
            return None;
        }
        let k = ((date - first).num_days() / 7) as usize;
        (k < starts.len()).then_some(k)
    }
}

/// Weekly mean of the available daily values; `None` for weeks with none.
/// Also returns the number of weeks with incomplete daily coverage.
pub fn weekly_mean(dates: &[NaiveDate], daily: &[Option<f64>], calendar: &WeekCalendar) -> (Vec<Option<f64>>, usize) {
    let starts = calendar.week_starts();
    let mut sum = vec![0.0; starts.len()];
    let mut count = vec![0usize; starts.len()];
    for (d, v) in dates.iter().zip(daily) {
        if let (Some(k), Some(v)) = (calendar.week_of(*d, &starts), v) {
            sum[k] += v;
            count[k] += 1;
        }
    }
    let partial = count.iter().filter(|&&c| c > 0 && c < 7).count();
    let means = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    (means, partial)
}

/// Weekly new cases from daily cumulative counts. The cumulative count on
/// days before the first record is 0; later gaps carry the last value.
pub fn weekly_new_cases(records: &[(NaiveDate, f64)], calendar: &WeekCalendar) -> (Vec<f64>, NewCases) {
    let starts = calendar.week_starts();
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.0);
    let Some(&first) = starts.first() else {
        return (Vec::new(), cumulative_to_new(&[]));
    };
    let last = *starts.last().expect("nonempty") + Days::new(6);
    let mut series = Vec::new();
    let mut day = first - Days::new(1);
    let mut idx = 0;
    let mut current = 0.0;
    while day <= last {
        while idx < sorted.len() && sorted[idx].0 <= day {
            current = sorted[idx].1;
            idx += 1;
        }
        series.push(current);
        day = day + Days::new(1);
    }
    let nc = cumulative_to_new(&series);
    let mut weekly = vec![0.0; starts.len()];
    for (i, v) in nc.new.iter().enumerate() {
        weekly[i / 7] += v;
    }
    (weekly, nc)
}

/// Locations of the ingest inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestPaths {
    pub centroids: PathBuf,
    pub adjacency: PathBuf,
    pub cases: PathBuf,
    pub mobility: PathBuf,
    pub covariates: PathBuf,
    pub daily_covariates: Option<PathBuf>,
}

impl IngestPaths {
    /// Standard file names inside `dir`; the daily covariate file is used
    /// when present.
    pub fn in_dir(dir: &Path) -> Self {
        let daily = dir.join("daily_covariates.csv");
        Self {
            centroids: dir.join("centroids.csv"),
            adjacency: dir.join("adjacency.csv"),
            cases: dir.join("cases.csv"),
            mobility: dir.join("mobility.csv"),
            covariates: dir.join("covariates.csv"),
            daily_covariates: daily.exists().then_some(daily),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub counties: Vec<String>,
    pub week_starts: Vec<NaiveDate>,
    pub imputation: ImputationReport,
    /// County-week cells of the intervention averaged over fewer than 7 days.
    pub partial_weeks: usize,
    pub case_clamps: usize,
    pub clamped_total: f64,
    pub covariates: Vec<String>,
}

struct Table {
    context: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let context = path.display().to_string();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { context, header, rows })
    }

    fn require(&self, cols: &[&str]) -> Result<Vec<usize>> {
        let missing: Vec<String> = cols
            .iter()
            .filter(|c| !self.header.iter().any(|h| h == *c))
            .map(|c| format!("{} in {}", c, self.context))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        Ok(cols.iter().map(|c| self.header.iter().position(|h| h == c).expect("checked")).collect())
    }

    fn others(&self, used: &[&str]) -> Vec<(usize, String)> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| !used.contains(&h.as_str()))
            .map(|(i, h)| (i, h.clone()))
            .collect()
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.rows[row][col];
        s.parse::<f64>()
            .map_err(|e| parse_err(&self.context, format!("row {}: `{s}`: {e}", row + 2)))
    }

    fn opt_num(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let s = &self.rows[row][col];
        if s.is_empty() || s.eq_ignore_ascii_case("na") {
            Ok(None)
        } else {
            self.num(row, col).map(Some)
        }
    }

    fn date(&self, row: usize, col: usize) -> Result<NaiveDate> {
        let s = &self.rows[row][col];
        NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| parse_err(&self.context, format!("row {}: `{s}`: {e}", row + 2)))
    }

    fn county(&self, row: usize, col: usize, index: &HashMap<String, usize>) -> Result<usize> {
        let s = &self.rows[row][col];
        index
            .get(s)
            .copied()
            .ok_or_else(|| parse_err(&self.context, format!("row {}: unknown county `{s}`", row + 2)))
    }
}

fn daily_dates(calendar: &WeekCalendar) -> Vec<NaiveDate> {
    let starts = calendar.week_starts();
    let mut out = Vec::new();
    if let (Some(&f), Some(&l)) = (starts.first(), starts.last()) {
        let mut d = f;
        while d <= l + Days::new(6) {
            out.push(d);
            d = d + Days::new(1);
        }
    }
    out
}

/// Reads the county files and assembles the weekly panel.
pub fn ingest(paths: &IngestPaths, calendar: &WeekCalendar) -> Result<(PanelDataset, IngestReport)> {
    if calendar.end < calendar.start {
        return invalid("end date precedes start date");
    }
    let week_starts = calendar.week_starts();
    if week_starts.is_empty() {
        return invalid("no complete week between the start and end dates");
    }
    let days = daily_dates(calendar);
    let day_index: HashMap<NaiveDate, usize> = days.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let cent = Table::read(&paths.centroids)?;
    let cc = cent.require(&["county", "lat", "lon"])?;
    let mut counties = Vec::new();
    let mut centroids = Vec::new();
    let mut index = HashMap::new();
    for r in 0..cent.rows.len() {
        let name = cent.rows[r][cc[0]].clone();
        if index.insert(name.clone(), counties.len()).is_some() {
            return Err(parse_err(&cent.context, format!("duplicate county `{name}`")));
        }
        counties.push(name);
        centroids.push((cent.num(r, cc[1])?, cent.num(r, cc[2])?));
    }
    let nj = counties.len();
    if nj == 0 {
        return invalid("no counties in the centroid file");
    }

    let adj = Table::read(&paths.adjacency)?;
    let ac = adj.require(&["county_a", "county_b"])?;
    let mut edges = Vec::new();
    for r in 0..adj.rows.len() {
        let (a, b) = (adj.county(r, ac[0], &index)?, adj.county(r, ac[1], &index)?);
        if a != b {
            edges.push((a, b));
        }
    }
    let graph = AdjacencyGraph::from_edges(nj, &edges)?;

    let mob = Table::read(&paths.mobility)?;
    let mut mcols = vec!["county", "date"];
    mcols.extend(MobilityCategory::ALL.iter().map(|c| c.column()));
    let mc = mob.require(&mcols)?;
    let mut values = vec![vec![[None; 5]; days.len()]; nj];
    for r in 0..mob.rows.len() {
        let j = mob.county(r, mc[0], &index)?;
        let Some(&d) = day_index.get(&mob.date(r, mc[1])?) else { continue };
        for k in 0..5 {
            values[j][d][k] = mob.opt_num(r, mc[2 + k])?;
        }
    }
    let panel = MobilityPanel { counties: counties.clone(), dates: days.clone(), values, centroids };
    let (filled, imputation) = impute_missing(&aggregate_mobility(&panel), &graph, &panel.centroids)?;
    if !imputation.unfilled.is_empty() {
        warn!("{} county-days of mobility have no donors", imputation.unfilled.len());
    }
    let nt = week_starts.len();
    let mut a = DMatrix::zeros(nj, nt);
    let mut partial_weeks = 0;
    for j in 0..nj {
        let (weekly, partial) = weekly_mean(&days, &filled[j], calendar);
        partial_weeks += partial;
        for (t, v) in weekly.iter().enumerate() {
            a[(j, t)] = v.ok_or_else(|| {
                Error::Numerical(format!("county {} has no mobility data in week {}", counties[j], week_starts[t]))
            })?;
        }
    }

    let cases = Table::read(&paths.cases)?;
    let kc = cases.require(&["county", "date", "cumulative"])?;
    let mut records: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); nj];
    for r in 0..cases.rows.len() {
        let j = cases.county(r, kc[0], &index)?;
        records[j].push((cases.date(r, kc[1])?, cases.num(r, kc[2])?));
    }
    let mut y = DMatrix::zeros(nj, nt);
    let (mut case_clamps, mut clamped_total) = (0, 0.0);
    for j in 0..nj {
        let (weekly, nc) = weekly_new_cases(&records[j], calendar);
        case_clamps += nc.clamps;
        clamped_total += nc.clamped_total;
        for t in 0..nt {
            y[(j, t)] = weekly[t].round().max(0.0) as u64;
        }
    }

    let cov = Table::read(&paths.covariates)?;
    let pc = cov.require(&["county", "population"])?;
    let statics = cov.others(&["county", "population"]);
    let mut population = vec![f64::NAN; nj];
    let mut x_names: Vec<String> = statics.iter().map(|s| s.1.clone()).collect();
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::from_element(nj, nt, f64::NAN); statics.len()];
    for r in 0..cov.rows.len() {
        let j = cov.county(r, pc[0], &index)?;
        population[j] = cov.num(r, pc[1])?;
        for (k, (c, _)) in statics.iter().enumerate() {
            let v = cov.num(r, *c)?;
            x[k].row_mut(j).fill(v);
        }
    }
    if let Some(j) = population.iter().position(|p| !p.is_finite()) {
        return Err(parse_err(&cov.context, format!("no covariate row for county `{}`", counties[j])));
    }

    if let Some(path) = &paths.daily_covariates {
        let dc = Table::read(path)?;
        let ic = dc.require(&["county", "date"])?;
        let cols = dc.others(&["county", "date"]);
        let mut daily = vec![vec![vec![None; days.len()]; nj]; cols.len()];
        for r in 0..dc.rows.len() {
            let j = dc.county(r, ic[0], &index)?;
            let Some(&d) = day_index.get(&dc.date(r, ic[1])?) else { continue };
            for (k, (c, _)) in cols.iter().enumerate() {
                daily[k][j][d] = dc.opt_num(r, *c)?;
            }
        }
        for (k, (_, name)) in cols.iter().enumerate() {
            let mut m = DMatrix::zeros(nj, nt);
            for j in 0..nj {
                let (weekly, _) = weekly_mean(&days, &daily[k][j], calendar);
                for (t, v) in weekly.iter().enumerate() {
                    m[(j, t)] = v.ok_or_else(|| {
                        Error::Numerical(format!("county {} has no `{name}` values in week {}", counties[j], week_starts[t]))
                    })?;
                }
            }
            x_names.push(name.clone());
            x.push(m);
        }
    }
    if x.is_empty() {
        return Err(Error::MissingColumns(vec!["at least one covariate column in covariates.csv".into()]));
    }

    let ds = PanelDataset {
        graph,
        y,
        a,
        x,
        x_names: x_names.clone(),
        population,
        unobserved_prefix: 0,
        truth: None,
    };
    ds.validate()?;
    let report = IngestReport {
        counties,
        week_starts,
        imputation,
        partial_weeks,
        case_clamps,
        clamped_total,
        covariates: x_names,
    };
    Ok((ds, report))
}

/// Everything needed to fit one variant to an ingested panel.
#[derive(Debug, Clone)]
pub struct ApplicationRun {
    pub dataset: PanelDataset,
    pub design: PropensityDesign,
    pub config: FitConfig,
    pub variant: ModelVariant,
}

/// First 0-based week entering the likelihood in the application.
pub const APPLICATION_WINDOW_START: usize = 7;

/// Application settings for lag `lag`: the real-data propensity design, the
/// fit window from week 8 (later if the lags require it) and chain lengths
/// of 100,000/20,000, doubled for the full model.
pub fn application_config(design: &PropensityDesign, lag: usize, variant: ModelVariant) -> FitConfig {
    let (iterations, burn_in) = if variant == ModelVariant::Full { (200_000, 40_000) } else { (100_000, 20_000) };
    FitConfig {
        iterations,
        burn_in,
        lag,
        window_start: APPLICATION_WINDOW_START.max(lag + design.valid_from()),
        isolated_policy: IsolatedPolicy::SelfLoop,
        ..FitConfig::default()
    }
}

pub fn build_application_run(panel_dir: &Path, lag: usize, variant: ModelVariant) -> Result<ApplicationRun> {
    let dataset = PanelDataset::read_dir(panel_dir)?;
    let design = PropensityDesign::application();
    if dataset.x.is_empty() {
        return Err(Error::MissingColumns(vec!["covariates".into()]));
    }
    design.validate(dataset.n_times())?;
    let config = application_config(&design, lag, variant);
    if config.window_start >= dataset.n_times() {
        return invalid(format!(
            "panel has {} weeks but the fit window starts at week {}",
            dataset.n_times(),
            config.window_start + 1
        ));
    }
    Ok(ApplicationRun { dataset, design, config, variant })
}
