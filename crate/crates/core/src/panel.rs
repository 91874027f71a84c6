//! Region-by-time panel data and its on-disk directory layout.
//!
//! A dataset directory contains:
//!
//! | file          | content                                                  |
//! |---------------|----------------------------------------------------------|
//! | `graph.txt`   | adjacency (`nodes <J>` header, one `j k` line per edge)  |
//! | `Y.csv`       | reported counts, header `region,t0,...,t{T-1}`           |
//! | `A.csv`       | intervention, same layout                                |
//! | `X_<k>.csv`   | covariate `k` (1-based), same layout                     |
//! | `N.csv`       | header `region,population`                               |
//! | `panel.json`  | covariate names and the unobserved prefix length         |
//! | `truth.json`  | optional latent paths of a simulated dataset             |
//!
//! Real-valued cells are written in shortest round-trip form, so reading a
//! directory back reproduces every value bit for bit.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::graph::{neighbor_average, AdjacencyGraph, IsolatedPolicy};
use crate::sir::BetaModel;

/// Latent quantities of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta_model: BetaModel,
    pub susceptible: DMatrix<f64>,
    pub infected: DMatrix<f64>,
    pub recovered: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub log_beta: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl Truth {
    pub(crate) fn zeros(nj: usize, nt: usize, beta_model: BetaModel) -> Self {
        let z = DMatrix::zeros(nj, nt);
        Self {
            beta_model,
            susceptible: z.clone(),
            infected: z.clone(),
            recovered: z.clone(),
            lambda: z.clone(),
            theta: z.clone(),
            v: z.clone(),
            log_beta: z.clone(),
            g: z,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    beta_model: BetaModel,
    susceptible: Vec<Vec<f64>>,
    infected: Vec<Vec<f64>>,
    recovered: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
    theta: Vec<Vec<Option<f64>>>,
    v: Vec<Vec<f64>>,
    log_beta: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PanelMeta {
    n_regions: usize,
    n_times: usize,
    x_names: Vec<String>,
    unobserved_prefix: usize,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Observed panel `{Y_j(t), A_j(t), X_j(t)}` plus adjacency and populations.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub graph: AdjacencyGraph,
    pub y: DMatrix<u64>,
    pub a: DMatrix<f64>,
    pub x: Vec<DMatrix<f64>>,
    pub x_names: Vec<String>,
    pub population: Vec<f64>,
    /// Leading time points whose counts are structurally zero (report lag).
    pub unobserved_prefix: usize,
    pub truth: Option<Truth>,
}

impl PanelDataset {
    pub fn n_regions(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn n_times(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = (self.n_regions(), self.n_times());
        let dims_ok = self.y.shape() == shape
            && self.a.shape() == shape
            && self.x.iter().all(|x| x.shape() == shape)
            && self.population.len() == shape.0
            && self.x_names.len() == self.x.len();
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "panel arrays disagree with {}x{} regions x times",
                shape.0, shape.1
            )));
        }
        if self.population.iter().any(|&n| !(n > 0.0)) {
            return Err(Error::InvalidArgument("populations must be positive".into()));
        }
        if self.a.iter().chain(self.x.iter().flat_map(|x| x.iter())).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("A and X must be finite".into()));
        }
        Ok(())
    }

    pub fn y_real(&self) -> DMatrix<f64> {
        self.y.map(|v| v as f64)
    }

    pub fn a_tilde(&self, policy: IsolatedPolicy) -> Result<DMatrix<f64>> {
        neighbor_average(&self.graph, &self.a, policy)
    }

    pub fn x_tilde(&self, policy: IsolatedPolicy) -> Result<Vec<DMatrix<f64>>> {
        self.x.iter().map(|x| neighbor_average(&self.graph, x, policy)).collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        self.graph.write(&dir.join("graph.txt"))?;
        write_matrix(&dir.join("Y.csv"), &self.y.map(|v| v.to_string()))?;
        write_real_matrix(&dir.join("A.csv"), &self.a)?;
        for (k, x) in self.x.iter().enumerate() {
            write_real_matrix(&dir.join(format!("X_{}.csv", k + 1)), x)?;
        }
        let mut w = csv::Writer::from_path(dir.join("N.csv"))?;
        w.write_record(["region", "population"])?;
        for (j, n) in self.population.iter().enumerate() {
            w.write_record([j.to_string(), n.to_string()])?;
        }
        w.flush()?;
        let meta = PanelMeta {
            n_regions: self.n_regions(),
            n_times: self.n_times(),
            x_names: self.x_names.clone(),
            unobserved_prefix: self.unobserved_prefix,
        };
        std::fs::write(dir.join("panel.json"), serde_json::to_string_pretty(&meta)?)?;
        let truth_path = dir.join("truth.json");
        match &self.truth {
            Some(t) => {
                let file = TruthFile {
                    beta_model: t.beta_model.clone(),
                    susceptible: matrix_rows(&t.susceptible),
                    infected: matrix_rows(&t.infected),
                    recovered: matrix_rows(&t.recovered),
                    lambda: matrix_rows(&t.lambda),
                    theta: t
                        .theta
                        .row_iter()
                        .map(|r| r.iter().map(|&v| v.is_finite().then_some(v)).collect())
                        .collect(),
                    v: matrix_rows(&t.v),
                    log_beta: matrix_rows(&t.log_beta),
                    g: matrix_rows(&t.g),
                };
                std::fs::write(truth_path, serde_json::to_string(&file)?)?;
            }
            None if truth_path.exists() => std::fs::remove_file(truth_path)?,
            None => {}
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let graph = AdjacencyGraph::read(&dir.join("graph.txt"))?;
        let meta: PanelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("panel.json"))?)?;
        let y = read_matrix(&dir.join("Y.csv"), |s| s.parse::<u64>().map_err(|e| e.to_string()))?;
        let a = read_real_matrix(&dir.join("A.csv"))?;
        let x = (1..=meta.x_names.len())
            .map(|k| read_real_matrix(&dir.join(format!("X_{k}.csv"))))
            .collect::<Result<Vec<_>>>()?;
        let mut rdr = csv::Reader::from_path(dir.join("N.csv"))?;
        let mut population = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let v = rec
                .get(1)
                .ok_or_else(|| parse_err("N.csv", "missing population column"))?
                .parse::<f64>()
                .map_err(|e| parse_err("N.csv", e.to_string()))?;
            population.push(v);
        }
        let truth_path = dir.join("truth.json");
        let truth = if truth_path.exists() {
            let f: TruthFile = serde_json::from_str(&std::fs::read_to_string(truth_path)?)?;
            let theta_rows: Vec<Vec<f64>> = f
                .theta
                .iter()
                .map(|r| r.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
                .collect();
            Some(Truth {
                beta_model: f.beta_model,
                susceptible: rows_matrix(&f.susceptible)?,
                infected: rows_matrix(&f.infected)?,
                recovered: rows_matrix(&f.recovered)?,
                lambda: rows_matrix(&f.lambda)?,
                theta: rows_matrix(&theta_rows)?,
                v: rows_matrix(&f.v)?,
                log_beta: rows_matrix(&f.log_beta)?,
                g: rows_matrix(&f.g)?,
            })
        } else {
            None
        };
        let ds = Self {
            graph,
            y,
            a,
            x,
            x_names: meta.x_names,
            population,
            unobserved_prefix: meta.unobserved_prefix,
            truth,
        };
        if ds.n_regions() != meta.n_regions || ds.n_times() != meta.n_times {
            return Err(Error::Dimension("panel.json dimensions disagree with the data files".into()));
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn write_real_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_matrix(path, &m.map(|v| v.to_string()))
}

pub(crate) fn write_matrix(path: &Path, cells: &DMatrix<String>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["region".to_string()];
    header.extend((0..cells.ncols()).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for j in 0..cells.nrows() {
        let mut rec = vec![j.to_string()];
        rec.extend(cells.row(j).iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_real_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix(path, |s| s.parse::<f64>().map_err(|e| e.to_string()))
}

pub(crate) fn read_matrix<T, F>(path: &Path, parse: F) -> Result<DMatrix<T>>
where
    T: nalgebra::Scalar + Copy,
    F: Fn(&str) -> std::result::Result<T, String>,
{
    let ctx = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let n_cols = rdr.headers()?.len().saturating_sub(1);
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n_cols + 1 {
            return Err(parse_err(&ctx, format!("row {} has {} cells, expected {}", i, rec.len(), n_cols + 1)));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|c| parse(c.trim()).map_err(|e| parse_err(&ctx, format!("row {i}: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok(DMatrix::from_fn(rows.len(), n_cols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::{simulate_scenario, ScenarioConfig};

    #[test]
    fn directory_round_trip_is_exact() {
        let config = ScenarioConfig { rows: 3, cols: 2, n_times: 7, seed: 4, ..Default::default() };
        let ds = simulate_scenario(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = PanelDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.y, ds.y);
        assert_eq!(back.a, ds.a);
        assert_eq!(back.x, ds.x);
        assert_eq!(back.population, ds.population);
        assert_eq!(back.graph, ds.graph);
        assert_eq!(back.unobserved_prefix, 2);
        let header = std::fs::read_to_string(dir.path().join("Y.csv")).unwrap();
        assert!(header.starts_with("region,t0,t1,t2,t3,t4,t5,t6\n"));
        assert!(back.truth.is_some());
    }

    #[test]
    fn validate_catches_shape_errors() {
        let config = ScenarioConfig { rows: 2, cols: 2, n_times: 4, ..Default::default() };
        let mut ds = simulate_scenario(&config).unwrap();
        ds.population.pop();
        assert!(matches!(ds.validate(), Err(Error::Dimension(_))));
    }
}
