//! Generalized propensity scores for the direct and spillover interventions.
//!
//! The direct score `e_j(t)` is the fitted conditional mean of `A_j(t)` from a
//! least-squares regression on intervention, covariate and response history.
//! The spillover score defaults to the neighbor average of `e`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::graph::{neighbor_average, IsolatedPolicy};
use crate::panel::{read_matrix, write_matrix, PanelDataset};

/// How a lagged count enters a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YTransform {
    Raw,
    /// `log(1 + Y)`
    Log1p,
    /// `log(Y + 1) - log(N)`
    LogRate,
}

/// One regressor block. `t` below is the 1-based time index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Intercept,
    /// `A(t - k)`
    ALag(usize),
    /// `X_c(t - k)` for every covariate `c`
    XLag(usize),
    /// transformed `Y(t - k)`, `k >= 1`
    YLag(usize, YTransform),
    /// `A~(t - k)`
    ATildeLag(usize),
    /// `t, t^2, ..., t^d`
    TimePoly(usize),
    /// weeks since the first reported case, powers `1..=d`
    WeeksSinceFirstCase(usize),
    /// `t * A(t - k)`
    TimeByALag(usize),
    /// `A(1)`
    BaselineA,
}

impl Term {
    fn lag(&self) -> usize {
        match *self {
            Term::ALag(k) | Term::XLag(k) | Term::YLag(k, _) | Term::ATildeLag(k) | Term::TimeByALag(k) => k,
            Term::WeeksSinceFirstCase(_) => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "intercept"),
            Term::ALag(k) => write!(f, "a_lag:{k}"),
            Term::XLag(k) => write!(f, "x_lag:{k}"),
            Term::YLag(k, tr) => write!(
                f,
                "y_lag:{k}:{}",
                match tr {
                    YTransform::Raw => "raw",
                    YTransform::Log1p => "log1p",
                    YTransform::LogRate => "lograte",
                }
            ),
            Term::ATildeLag(k) => write!(f, "a_tilde_lag:{k}"),
            Term::TimePoly(d) => write!(f, "time_poly:{d}"),
            Term::WeeksSinceFirstCase(d) => write!(f, "weeks_since_first_case:{d}"),
            Term::TimeByALag(k) => write!(f, "time_x_a_lag:{k}"),
            Term::BaselineA => write!(f, "baseline_a"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| parse_err("propensity term", format!("`{s}` needs an integer argument")))?
                .parse()
                .map_err(|e| parse_err("propensity term", format!("`{s}`: {e}")))
        };
        let term = match parts[0] {
            "intercept" => Term::Intercept,
            "a_lag" => Term::ALag(num(1)?),
            "x_lag" => Term::XLag(num(1)?),
            "y_lag" => {
                let tr = match parts.get(2).copied().unwrap_or("raw") {
                    "raw" => YTransform::Raw,
                    "log1p" => YTransform::Log1p,
                    "lograte" => YTransform::LogRate,
                    other => return Err(parse_err("propensity term", format!("unknown transform `{other}`"))),
                };
                Term::YLag(num(1)?, tr)
            }
            "a_tilde_lag" => Term::ATildeLag(num(1)?),
            "time_poly" => Term::TimePoly(num(1)?),
            "weeks_since_first_case" => Term::WeeksSinceFirstCase(num(1)?),
            "time_x_a_lag" => Term::TimeByALag(num(1)?),
            "baseline_a" => Term::BaselineA,
            other => return Err(parse_err("propensity term", format!("unknown term `{other}`"))),
        };
        Ok(term)
    }
}

impl Serialize for Term {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Regressor list for the direct propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityDesign {
    pub terms: Vec<Term>,
}

impl Default for PropensityDesign {
    fn default() -> Self {
        Self::simulation()
    }
}

impl PropensityDesign {
    /// `A(t-1), A(t-2), X(t), X(t-1), Y(t-1)` plus intercept.
    pub fn simulation() -> Self {
        Self {
            terms: vec![
                Term::Intercept,
                Term::ALag(1),
                Term::ALag(2),
                Term::XLag(0),
                Term::XLag(1),
                Term::YLag(1, YTransform::Raw),
            ],
        }
    }

    /// Real-data design: previous intervention, current and lagged
    /// covariates, quadratic trends in time and in weeks since the first
    /// case, a time-by-intervention interaction, baseline mobility and the
    /// lagged log case rate.
    pub fn application() -> Self {
        Self {
            terms: vec![
                Term::Intercept,
                Term::ALag(1),
                Term::XLag(0),
                Term::XLag(1),
                Term::WeeksSinceFirstCase(2),
                Term::TimePoly(2),
                Term::TimeByALag(1),
                Term::BaselineA,
                Term::YLag(1, YTransform::LogRate),
            ],
        }
    }

    pub fn max_lag(&self) -> usize {
        self.terms.iter().map(Term::lag).max().unwrap_or(0)
    }

    /// First 0-based time index at which every regressor is available.
    pub fn valid_from(&self) -> usize {
        self.max_lag()
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        if !self.terms.contains(&Term::Intercept) {
            return invalid("propensity design must include an intercept");
        }
        if self.terms.iter().any(|t| matches!(t, Term::YLag(0, _))) {
            return invalid("the current response cannot be a propensity regressor; use y_lag >= 1");
        }
        if self.max_lag() >= n_times {
            return invalid(format!(
                "maximum lag {} needs more than {} time points",
                self.max_lag(),
                n_times
            ));
        }
        Ok(())
    }
}

/// Panel inputs of a design; the spillover regression swaps in the
/// neighbor-averaged arrays.
pub struct DesignInputs<'a> {
    pub a: &'a DMatrix<f64>,
    pub a_tilde: &'a DMatrix<f64>,
    pub x: &'a [DMatrix<f64>],
    pub x_names: &'a [String],
    pub y: &'a DMatrix<f64>,
    pub population: &'a [f64],
}

/// Stacked regression problem. Rows are ordered time-major: all regions at
/// `valid_from`, then all regions at `valid_from + 1`, and so on; columns
/// follow the term order with one column per covariate for `x_lag` and one
/// per power for polynomial terms.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub rows: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub index: Vec<(usize, usize)>,
    pub names: Vec<String>,
    pub valid_from: usize,
}

fn lag_label(base: &str, k: usize) -> String {
    if k == 0 {
        format!("{base}(t)")
    } else {
        format!("{base}(t-{k})")
    }
}

pub fn build_design_matrix(dataset: &PanelDataset, design: &PropensityDesign) -> Result<DesignMatrix> {
    let a_tilde = dataset.a_tilde(IsolatedPolicy::SelfLoop)?;
    let y = dataset.y_real();
    build_design_from(
        &DesignInputs {
            a: &dataset.a,
            a_tilde: &a_tilde,
            x: &dataset.x,
            x_names: &dataset.x_names,
            y: &y,
            population: &dataset.population,
        },
        design,
    )
}

pub fn build_design_from(inputs: &DesignInputs<'_>, design: &PropensityDesign) -> Result<DesignMatrix> {
    let (nj, nt) = inputs.a.shape();
    design.validate(nt)?;
    let valid_from = design.valid_from();

    // first week with a reported case, per region
    let first_case: Vec<Option<usize>> = (0..nj)
        .map(|j| (0..nt).find(|&t| inputs.y[(j, t)] > 0.0))
        .collect();
    let mut columns: Vec<(String, Box<dyn Fn(usize, usize) -> f64 + '_>)> = Vec::new();
    for term in &design.terms {
        match *term {
            Term::Intercept => columns.push(("intercept".into(), Box::new(|_, _| 1.0))),
            Term::ALag(k) => columns.push((lag_label("A", k), Box::new(move |j, t| inputs.a[(j, t - k)]))),
            Term::ATildeLag(k) => {
                columns.push((lag_label("A~", k), Box::new(move |j, t| inputs.a_tilde[(j, t - k)])))
            }
            Term::XLag(k) => {
                for (c, name) in inputs.x_names.iter().enumerate() {
                    columns.push((lag_label(name, k), Box::new(move |j, t| inputs.x[c][(j, t - k)])));
                }
            }
            Term::YLag(k, tr) => {
                let label = match tr {
                    YTransform::Raw => lag_label("Y", k),
                    YTransform::Log1p => format!("log1p({})", lag_label("Y", k)),
                    YTransform::LogRate => format!("log({}+1)-log(N)", lag_label("Y", k)),
                };
                columns.push((
                    label,
                    Box::new(move |j, t| {
                        let v = inputs.y[(j, t - k)];
                        match tr {
                            YTransform::Raw => v,
                            YTransform::Log1p => v.ln_1p(),
                            YTransform::LogRate => v.ln_1p() - inputs.population[j].ln(),
                        }
                    }),
                ));
            }
            Term::TimePoly(d) => {
                for p in 1..=d {
                    let label = if p == 1 { "t".to_string() } else { format!("t^{p}") };
                    columns.push((label, Box::new(move |_, t| ((t + 1) as f64).powi(p as i32))));
                }
            }
            Term::WeeksSinceFirstCase(d) => {
                for p in 1..=d {
                    let label = if p == 1 { "weeks_since_first_case".to_string() } else { format!("weeks_since_first_case^{p}") };
                    let fc = &first_case;
                    columns.push((
                        label,
                        Box::new(move |j, t| match fc[j] {
                            Some(f) if f < t => ((t - f) as f64).powi(p as i32),
                            _ => 0.0,
                        }),
                    ));
                }
            }
            Term::TimeByALag(k) => columns.push((
                format!("t*{}", lag_label("A", k)),
                Box::new(move |j, t| (t + 1) as f64 * inputs.a[(j, t - k)]),
            )),
            Term::BaselineA => columns.push(("A(1)".into(), Box::new(|j, _| inputs.a[(j, 0)]))),
        }
    }

    let index: Vec<(usize, usize)> = (valid_from..nt).flat_map(|t| (0..nj).map(move |j| (j, t))).collect();
    let rows = DMatrix::from_fn(index.len(), columns.len(), |r, c| {
        let (j, t) = index[r];
        (columns[c].1)(j, t)
    });
    let targets = DVector::from_iterator(index.len(), index.iter().map(|&(j, t)| inputs.a[(j, t)]));
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("propensity design contains non-finite values".into()));
    }
    Ok(DesignMatrix {
        rows,
        targets,
        index,
        names: columns.into_iter().map(|(n, _)| n).collect(),
        valid_from,
    })
}

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub rank: usize,
    pub used_pseudoinverse: bool,
}

impl LeastSquaresFit {
    pub fn residuals(&self, targets: &DVector<f64>) -> DVector<f64> {
        targets - &self.fitted
    }
}

const RANK_TOL: f64 = 1e-10;

/// Least squares via Householder QR on internally standardized columns,
/// falling back to an SVD pseudoinverse when the design is numerically
/// rank deficient. Coefficients are reported on the original column scale.
pub fn fit_least_squares(rows: &DMatrix<f64>, targets: &DVector<f64>) -> Result<LeastSquaresFit> {
    let (n, p) = rows.shape();
    if targets.len() != n {
        return Err(Error::Dimension(format!("{n} design rows but {} targets", targets.len())));
    }
    if n == 0 || p == 0 {
        return invalid("least squares needs at least one row and one column");
    }

    // column scaling; centering only when a constant column keeps the span
    let mut constant = vec![false; p];
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for c in 0..p {
        let col = rows.column(c);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        constant[c] = lo == hi;
    }
    let has_constant = (0..p).any(|c| constant[c] && rows[(0, c)] != 0.0);
    for c in 0..p {
        let col = rows.column(c);
        if constant[c] {
            scale[c] = if col[0] != 0.0 { col[0] } else { 1.0 };
        } else if has_constant {
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            center[c] = mean;
            scale[c] = sd;
        } else {
            scale[c] = (col.norm_squared() / n as f64).sqrt();
        }
    }
    let z = DMatrix::from_fn(n, p, |r, c| (rows[(r, c)] - center[c]) / scale[c]);

    let qr = z.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
    let max_diag = diag.iter().copied().fold(0.0, f64::max);
    let full_rank = n >= p && diag.iter().all(|&d| d > RANK_TOL * max_diag);
    let (b, rank, used_pinv) = if full_rank {
        let qty = qr.q().transpose() * targets;
        let b = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        (b, p, false)
    } else {
        warn!("propensity design is rank deficient; using pseudoinverse solution");
        let svd = z.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = RANK_TOL * smax;
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        let b = svd
            .solve(targets, eps)
            .map_err(|e| Error::Numerical(format!("pseudoinverse solve failed: {e}")))?;
        (b, rank, true)
    };
    let fitted = &z * &b;

    let mut coefficients = DVector::zeros(p);
    let mut offset = 0.0;
    for c in 0..p {
        if !constant[c] {
            coefficients[c] = b[c] / scale[c];
            offset += b[c] * center[c] / scale[c];
        }
    }
    let mut absorbed = false;
    for c in 0..p {
        if constant[c] {
            coefficients[c] = b[c] / scale[c];
            if !absorbed && rows[(0, c)] != 0.0 {
                coefficients[c] -= offset / scale[c];
                absorbed = true;
            }
        }
    }
    Ok(LeastSquaresFit {
        coefficients,
        fitted,
        rank,
        used_pseudoinverse: used_pinv,
    })
}

/// Spillover score as the neighbor average of the direct score.
pub fn indirect_scores(graph: &crate::graph::AdjacencyGraph, e: &DMatrix<f64>, policy: IsolatedPolicy) -> Result<DMatrix<f64>> {
    neighbor_average(graph, e, policy)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndirectMethod {
    #[default]
    NeighborAverage,
    /// Separate regression of `A~` on neighbor-averaged regressors.
    Regression,
}

/// Fitted direct and spillover scores, `NaN` before `valid_from`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityScores {
    pub e: DMatrix<f64>,
    pub e_tilde: DMatrix<f64>,
    pub valid_from: usize,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
}

impl PropensityScores {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let fmt = |m: &DMatrix<f64>| m.map(|v| if v.is_finite() { v.to_string() } else { "NA".to_string() });
        write_matrix(&dir.join("e.csv"), &fmt(&self.e))?;
        write_matrix(&dir.join("e_tilde.csv"), &fmt(&self.e_tilde))?;
        Ok(())
    }

    /// Reads `e.csv`/`e_tilde.csv`; `valid_from` is the first column with no
    /// missing cells.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let parse = |s: &str| {
            if s == "NA" {
                Ok(f64::NAN)
            } else {
                s.parse::<f64>().map_err(|e| e.to_string())
            }
        };
        let e = read_matrix(&dir.join("e.csv"), parse)?;
        let e_tilde = read_matrix(&dir.join("e_tilde.csv"), parse)?;
        let valid_from = (0..e.ncols())
            .find(|&t| e.column(t).iter().all(|v| v.is_finite()))
            .unwrap_or(e.ncols());
        Ok(Self {
            e,
            e_tilde,
            valid_from,
            names: Vec::new(),
            coefficients: Vec::new(),
        })
    }
}

fn scatter(index: &[(usize, usize)], values: &DVector<f64>, nj: usize, nt: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_element(nj, nt, f64::NAN);
    for (&(j, t), &v) in index.iter().zip(values.iter()) {
        m[(j, t)] = v;
    }
    m
}

/// Fits the direct propensity model and derives the spillover score.
pub fn estimate_scores(
    dataset: &PanelDataset,
    design: &PropensityDesign,
    method: IndirectMethod,
    policy: IsolatedPolicy,
) -> Result<PropensityScores> {
    let (nj, nt) = (dataset.n_regions(), dataset.n_times());
    let dm = build_design_matrix(dataset, design)?;
    let fit = fit_least_squares(&dm.rows, &dm.targets)?;
    let e = scatter(&dm.index, &fit.fitted_original(&dm), nj, nt);
    let e_tilde = match method {
        IndirectMethod::NeighborAverage => indirect_scores(&dataset.graph, &e, policy)?,
        IndirectMethod::Regression => {
            let a_t = dataset.a_tilde(policy)?;
            let a_tt = neighbor_average(&dataset.graph, &a_t, policy)?;
            let x_t = dataset.x_tilde(policy)?;
            let y_t = neighbor_average(&dataset.graph, &dataset.y_real(), policy)?;
            let tdm = build_design_from(
                &DesignInputs {
                    a: &a_t,
                    a_tilde: &a_tt,
                    x: &x_t,
                    x_names: &dataset.x_names,
                    y: &y_t,
                    population: &dataset.population,
                },
                design,
            )?;
            let tfit = fit_least_squares(&tdm.rows, &tdm.targets)?;
            scatter(&tdm.index, &tfit.fitted_original(&tdm), nj, nt)
        }
    };
    Ok(PropensityScores {
        e,
        e_tilde,
        valid_from: dm.valid_from,
        names: dm.names,
        coefficients: fit.coefficients.iter().copied().collect(),
    })
}

impl LeastSquaresFit {
    fn fitted_original(&self, dm: &DesignMatrix) -> DVector<f64> {
        if self.used_pseudoinverse {
            self.fitted.clone()
        } else {
            &dm.rows * &self.coefficients
        }
    }
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Marginal correlation of `A(t)` with the first covariate `X(t)`, and their
/// partial correlation given `e(t)`, over cells where the score is defined.
pub fn balance_diagnostic(dataset: &PanelDataset, scores: &PropensityScores) -> Result<(f64, f64)> {
    let x = dataset
        .x
        .first()
        .ok_or_else(|| Error::InvalidArgument("balance diagnostic needs a covariate".into()))?;
    let mut a_v = Vec::new();
    let mut x_v = Vec::new();
    let mut e_v = Vec::new();
    for t in scores.valid_from..dataset.n_times() {
        for j in 0..dataset.n_regions() {
            a_v.push(dataset.a[(j, t)]);
            x_v.push(x[(j, t)]);
            e_v.push(scores.e[(j, t)]);
        }
    }
    let design = DMatrix::from_fn(e_v.len(), 2, |r, c| if c == 0 { 1.0 } else { e_v[r] });
    let resid = |v: &[f64]| -> Result<Vec<f64>> {
        let target = DVector::from_column_slice(v);
        let fit = fit_least_squares(&design, &target)?;
        Ok(fit.residuals(&target).iter().copied().collect())
    };
    Ok((correlation(&a_v, &x_v), correlation(&resid(&a_v)?, &resid(&x_v)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::{simulate_scenario, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dataset() -> PanelDataset {
        simulate_scenario(&ScenarioConfig { rows: 4, cols: 4, n_times: 12, seed: 21, ..Default::default() }).unwrap()
    }

    #[test]
    fn intercept_only_design() {
        let ds = small_dataset();
        let design = PropensityDesign { terms: vec![Term::Intercept] };
        let dm = build_design_matrix(&ds, &design).unwrap();
        assert_eq!(dm.rows.ncols(), 1);
        assert!(dm.rows.iter().all(|&v| v == 1.0));
        assert_eq!(dm.valid_from, 0);
        let fit = fit_least_squares(&dm.rows, &dm.targets).unwrap();
        let mean = dm.targets.mean();
        assert!(fit.fitted.iter().all(|&f| (f - mean).abs() < 1e-12));
    }

    #[test]
    fn simulation_design_layout() {
        let ds = small_dataset();
        let dm = build_design_matrix(&ds, &PropensityDesign::simulation()).unwrap();
        assert_eq!(dm.valid_from, 2);
        assert_eq!(dm.names, vec!["intercept", "A(t-1)", "A(t-2)", "X1(t)", "X1(t-1)", "Y(t-1)"]);
        assert_eq!(dm.rows.nrows(), 16 * 10);
        assert_eq!(dm.index[0], (0, 2));
        assert_eq!(dm.index[16], (0, 3));
        let (j, t) = dm.index[5];
        assert_eq!(dm.rows[(5, 1)], ds.a[(j, t - 1)]);
        assert_eq!(dm.rows[(5, 5)], ds.y[(j, t - 1)] as f64);
        let on_30 = PropensityDesign::simulation();
        assert_eq!(on_30.valid_from(), 2);
    }

    #[test]
    fn application_design_terms() {
        let ds = small_dataset();
        let dm = build_design_matrix(&ds, &PropensityDesign::application()).unwrap();
        assert!(dm.names.contains(&"t*A(t-1)".to_string()));
        assert!(dm.names.contains(&"log(Y(t-1)+1)-log(N)".to_string()));
        assert!(dm.names.contains(&"weeks_since_first_case^2".to_string()));
        assert_eq!(dm.valid_from, 1);
    }

    #[test]
    fn lag_beyond_panel_rejected() {
        let ds = small_dataset();
        let design = PropensityDesign { terms: vec![Term::Intercept, Term::ALag(12)] };
        assert!(matches!(build_design_matrix(&ds, &design), Err(Error::InvalidArgument(_))));
        let no_intercept = PropensityDesign { terms: vec![Term::ALag(1)] };
        assert!(build_design_matrix(&ds, &no_intercept).is_err());
    }

    #[test]
    fn term_strings_round_trip() {
        for t in PropensityDesign::application().terms.iter().chain(&PropensityDesign::simulation().terms) {
            assert_eq!(t.to_string().parse::<Term>().unwrap(), *t);
        }
        assert!("a_lag".parse::<Term>().is_err());
        assert!("bogus:1".parse::<Term>().is_err());
    }

    #[test]
    fn exact_linear_target() {
        let x = DMatrix::from_fn(30, 2, |r, c| if c == 0 { 1.0 } else { r as f64 * 0.37 - 2.0 });
        let y = DVector::from_fn(30, |r, _| 1.5 - 0.8 * x[(r, 1)]);
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!(fit.residuals(&y).amax() <= 1e-10);
        assert!((fit.coefficients[0] - 1.5).abs() < 1e-10);
        assert!((fit.coefficients[1] + 0.8).abs() < 1e-10);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(50, 4, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = DVector::from_fn(50, |_, _| rng.random_range(-1.0..1.0));
        let fit = fit_least_squares(&x, &y).unwrap();
        let xtx = x.transpose() * &x;
        let oracle = xtx.cholesky().unwrap().solve(&(x.transpose() * &y));
        assert!((fit.coefficients - oracle).amax() < 1e-8);
    }

    #[test]
    fn residuals_orthogonal_to_columns() {
        let ds = small_dataset();
        let dm = build_design_matrix(&ds, &PropensityDesign::simulation()).unwrap();
        let fit = fit_least_squares(&dm.rows, &dm.targets).unwrap();
        let r = fit.residuals(&dm.targets);
        for c in 0..dm.rows.ncols() {
            let col = dm.rows.column(c);
            let scale = col.norm() * dm.targets.norm();
            assert!(col.dot(&r).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn degenerate_design_uses_pseudoinverse() {
        let x = DMatrix::from_fn(10, 3, |r, c| match c {
            0 => 1.0,
            1 => r as f64,
            _ => 2.0 * r as f64,
        });
        let y = DVector::from_element(10, 4.0);
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!(fit.used_pseudoinverse);
        assert_eq!(fit.rank, 2);
        assert!(fit.fitted.iter().all(|&f| (f - 4.0).abs() < 1e-9));
    }

    #[test]
    fn fitted_values_invariant_to_affine_rescaling() {
        let ds = small_dataset();
        let dm = build_design_matrix(&ds, &PropensityDesign::simulation()).unwrap();
        let base = fit_least_squares(&dm.rows, &dm.targets).unwrap();
        let mut scaled = dm.rows.clone();
        for v in scaled.column_mut(3).iter_mut() {
            *v = 250.0 * *v - 17.0;
        }
        for v in scaled.column_mut(5).iter_mut() {
            *v *= 1e-3;
        }
        let other = fit_least_squares(&scaled, &dm.targets).unwrap();
        assert!((&base.fitted - &other.fitted).amax() < 1e-8);
    }

    #[test]
    fn spillover_score_examples() {
        let ds = small_dataset();
        let scores = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
        assert!(scores.e.column(0).iter().all(|v| v.is_nan()));
        assert!(scores.e.column(2).iter().all(|v| v.is_finite()));
        let avg = indirect_scores(&ds.graph, &scores.e, IsolatedPolicy::Error).unwrap();
        assert_eq!(avg.column(5), scores.e_tilde.column(5));

        let path = crate::graph::rook_grid(1, 2).unwrap();
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let swapped = indirect_scores(&path, &e, IsolatedPolicy::Error).unwrap();
        assert_eq!(swapped, DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 2.0]));

        let reg = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::Regression, IsolatedPolicy::Error).unwrap();
        assert!(reg.e_tilde.column(4).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scores_file_round_trip() {
        let ds = small_dataset();
        let scores = estimate_scores(&ds, &PropensityDesign::simulation(), IndirectMethod::NeighborAverage, IsolatedPolicy::Error).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scores.write_dir(dir.path()).unwrap();
        let back = PropensityScores::read_dir(dir.path()).unwrap();
        assert_eq!(back.valid_from, 2);
        for t in 2..ds.n_times() {
            assert_eq!(back.e.column(t), scores.e.column(t));
        }
    }
}
