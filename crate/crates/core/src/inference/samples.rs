use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};

use super::model::{ModelParams, ModelVariant};
use super::FitConfig;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATENT_FILE: &str = "latent.csv";

/// Everything about a fit except the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: ModelVariant,
    pub config: FitConfig,
    /// Column names of each draw row.
    pub names: Vec<String>,
    pub n_draws: usize,
    pub n_regions: usize,
    pub n_times: usize,
    pub n_obs: usize,
    /// Post-burn-in acceptance rate per updated block.
    pub acceptance: BTreeMap<String, f64>,
    /// Iterations in which any rate exponent hit the `±700` clamp.
    pub clamped_iterations: u64,
    pub init_attempts: usize,
    pub version: String,
}

/// Latent fields at one stored iteration. Columns outside the fit window of
/// `g` are zero; `v_tilde` is absent for variants without a nugget.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    pub iteration: usize,
    pub theta: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub v_tilde: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub manifest: RunManifest,
    /// One row per retained draw, ordered as `manifest.names`.
    pub draws: Vec<Vec<f64>>,
    pub latent: Vec<LatentDraw>,
    /// State at the last iteration; not persisted.
    pub final_params: Option<ModelParams>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn names(&self) -> &[String] {
        &self.manifest.names
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.manifest.names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|r| r[k]).collect())
    }

    pub fn delta1(&self) -> Vec<f64> {
        self.column("delta1").unwrap_or_default()
    }

    pub fn delta2(&self) -> Vec<f64> {
        self.column("delta2").unwrap_or_default()
    }

    /// Names of the regression coefficients, in order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let end = self.manifest.names.iter().position(|n| n == "delta2").map_or(0, |k| k + 1);
        self.manifest.names[..end].to_vec()
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("draw");
        for n in &self.manifest.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.draws.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Writes `samples.csv`, `manifest.json` and, with stored latent draws,
    /// `latent.csv` (long format).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SAMPLES_FILE), self.samples_csv())?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        if !self.latent.is_empty() {
            let mut w = csv::Writer::from_path(dir.join(LATENT_FILE))?;
            w.write_record(["iteration", "field", "region", "t", "value"])?;
            for d in &self.latent {
                let mut fields = vec![("theta", &d.theta), ("g", &d.g)];
                if let Some(v) = &d.v_tilde {
                    fields.push(("v_tilde", v));
                }
                for (name, m) in fields {
                    for t in 0..m.ncols() {
                        for j in 0..m.nrows() {
                            w.write_record([
                                d.iteration.to_string(),
                                name.to_string(),
                                j.to_string(),
                                t.to_string(),
                                m[(j, t)].to_string(),
                            ])?;
                        }
                    }
                }
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Reads draws and manifest written by [`write_dir`](Self::write_dir).
    /// Latent draws are not read back.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let draws = read_samples_csv(&dir.join(SAMPLES_FILE), &manifest.names)?;
        Ok(Self {
            manifest,
            draws,
            latent: Vec::new(),
            final_params: None,
        })
    }
}

fn read_samples_csv(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("draw") || header[1..] != *names {
        return Err(parse_err(&ctx, "header does not match the manifest column names"));
    }
    let mut draws = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(&ctx, format!("row {i}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != names.len() {
            return Err(Error::Dimension(format!("{ctx}: row {i} has {} values", row.len())));
        }
        draws.push(row);
    }
    Ok(draws)
}
