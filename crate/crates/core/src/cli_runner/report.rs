//! Suite results, the JSON report and the CSV plot data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::kernel_iteration::GridParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    /// Reported, never gating.
    Info,
}

/// One number, its tolerance and the oracle it is compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: Option<f64>,
    pub relation: Relation,
    pub oracle: String,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, oracle: impl Into<String>) -> Self {
        Self { name: name.into(), value, tolerance: Some(tolerance), relation: Relation::AtMost, oracle: oracle.into(), pass: value <= tolerance }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64, oracle: impl Into<String>) -> Self {
        Self { name: name.into(), value, tolerance: Some(tolerance), relation: Relation::AtLeast, oracle: oracle.into(), pass: value >= tolerance }
    }

    pub fn info(name: impl Into<String>, value: f64, oracle: impl Into<String>) -> Self {
        Self { name: name.into(), value, tolerance: None, relation: Relation::Info, oracle: oracle.into(), pass: true }
    }

    /// A yes/no condition as `1 ≥ 1`.
    pub fn holds(name: impl Into<String>, ok: bool, oracle: impl Into<String>) -> Self {
        Self::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0, oracle)
    }
}

/// A fitted `g_{c,C}` with its refinement drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedEnvelope {
    pub instance: String,
    pub quantity: String,
    pub c: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
    pub refined_c: f64,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub envelopes: Vec<FittedEnvelope>,
}

impl CriterionResult {
    pub fn new(id: u8, title: &str) -> Self {
        Self { id, title: title.into(), pass: true, checks: Vec::new(), envelopes: Vec::new() }
    }

    pub fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn summary_line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let mut line = format!("criterion {:>2} {status}  {} ({} checks)", self.id, self.title, self.checks.len());
        for c in self.failures() {
            let rel = if c.relation == Relation::AtMost { "≤" } else { "≥" };
            line.push_str(&format!("\n    failed: {} = {:.4e}, needs {rel} {:.4e}", c.name, c.value, c.tolerance.unwrap_or(f64::NAN)));
        }
        line
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub grid: GridParams,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub pass: bool,
    pub provenance: Provenance,
    /// The resolved experiment, defaults included.
    pub config: ExperimentConfig,
    pub criteria: Vec<CriterionResult>,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, criteria: Vec<CriterionResult>) -> Result<Self> {
        Ok(Self {
            suite: cfg.suite.clone(),
            pass: criteria.iter().all(|c| c.pass),
            provenance: Provenance {
                config_hash: cfg.hash()?,
                seed: cfg.seed,
                grid: cfg.grid.clone(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            config: cfg.experiment(),
            criteria,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn failing(&self) -> Vec<&CriterionResult> {
        self.criteria.iter().filter(|c| !c.pass).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    pub instance: String,
    pub order: usize,
    /// `|x-y|²/(t-s)`
    pub scaled_distance: f64,
    /// `(t-s)^{(d+k)/2}|∂^k Γ|`
    pub scaled_value: f64,
    /// `c·exp(-C·scaled_distance)`
    pub envelope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub instance: String,
    pub m: usize,
    pub norm: f64,
    /// `‖K_{m+1}‖/‖K_m‖`, empty on the last level.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub instance: String,
    pub x: f64,
    pub t: f64,
    pub v_skorohod: f64,
    pub v_fractional: f64,
    pub combined_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub instance: String,
    pub log_h: f64,
    pub log_moment: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub collapse: Vec<CollapseRow>,
    pub k_ratios: Vec<RatioRow>,
    pub agreement: Vec<AgreementRow>,
    pub decay: Vec<DecayRow>,
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl PlotData {
    /// One CSV per plot, headers always present.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let files = [
            ("collapse.csv", vec!["instance", "order", "scaled_distance", "scaled_value", "envelope"]),
            ("k_ratios.csv", vec!["instance", "m", "norm", "ratio"]),
            ("agreement.csv", vec!["instance", "x", "t", "v_skorohod", "v_fractional", "combined_se"]),
            ("decay.csv", vec!["instance", "log_h", "log_moment"]),
        ];
        let paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f.0)).collect();
        write_csv(&paths[0], &files[0].1, &self.collapse)?;
        write_csv(&paths[1], &files[1].1, &self.k_ratios)?;
        write_csv(&paths[2], &files[2].1, &self.agreement)?;
        write_csv(&paths[3], &files[3].1, &self.decay)?;
        Ok(paths)
    }
}

/// Writes `report.json` and the plot CSVs into `dir`.
pub fn emit(report: &Report, plots: &PlotData, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?)?;
    let mut out = vec![path];
    out.extend(plots.write(dir)?);
    Ok(out)
}
