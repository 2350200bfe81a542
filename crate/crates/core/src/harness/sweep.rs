//! One scenario run per grid point, summarized into a single table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{Column, FileEntry, Manifest, Table};
use super::par_map;
use super::scenario::{run_scenario, ExperimentSpec, Scenario, DIMENSION_ALIGNMENT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Ambient dimension `d`. For `relu_vs_softmax` this also sets the start
    /// alignment to `DIMENSION_ALIGNMENT / sqrt(d)`.
    Dimension,
    /// Total strength; the head strengths keep their proportions.
    TotalStrength,
    Beta,
    Gamma0,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Dimension => "d",
            SweepParameter::TotalStrength => "total_strength",
            SweepParameter::Beta => "beta",
            SweepParameter::Gamma0 => "gamma0",
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "d" | "dimension" => Ok(SweepParameter::Dimension),
            "total_strength" | "lambda_total" => Ok(SweepParameter::TotalStrength),
            "beta" => Ok(SweepParameter::Beta),
            "gamma0" => Ok(SweepParameter::Gamma0),
            _ => Err(Error::SpecValidation(vec![format!(
                "parameter: unknown sweep parameter '{s}'; expected d, total_strength, beta or gamma0"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl SweepGrid {
    pub fn new(parameter: SweepParameter, values: Vec<f64>) -> Self {
        Self { parameter, values }
    }

    /// `count` evenly spaced values from `start` to `end` inclusive.
    pub fn linear(parameter: SweepParameter, start: f64, end: f64, count: usize) -> Self {
        let values = match count {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..count).map(|k| start + (end - start) * k as f64 / (count - 1) as f64).collect(),
        };
        Self { parameter, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: ExperimentSpec,
    pub grid: SweepGrid,
    /// In grid order.
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_TABLE: &str = "sweep";

fn unit_of(key: &str) -> &'static str {
    if key.starts_with("t_") || key == "halted_at" {
        "time"
    } else if key.contains("rate") {
        "1/time"
    } else if key.contains("energy") {
        "energy"
    } else if key.contains("entropy") {
        "nats"
    } else {
        "1"
    }
}

impl SweepResult {
    /// Union of the summary keys over all rows, sorted.
    pub fn keys(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.summary.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// One metric across the grid; `NaN` where a point failed or lacks the key.
    pub fn column(&self, key: &str) -> Vec<f64> {
        self.rows.iter().map(|r| r.summary.get(key).copied().unwrap_or(f64::NAN)).collect()
    }

    pub fn table(&self) -> Table {
        let keys = self.keys();
        let mut cols = vec![Column::new(self.grid.parameter.name(), "1")];
        cols.extend(keys.iter().map(|k| Column::new(k.clone(), unit_of(k))));
        cols.push(Column::new("failed", "bool"));
        let mut t = Table::new(SWEEP_TABLE, cols);
        for r in &self.rows {
            let mut row = vec![r.value];
            row.extend(keys.iter().map(|k| r.summary.get(k).copied().unwrap_or(f64::NAN)));
            row.push(f64::from(u8::from(r.error.is_some())));
            t.push(row);
        }
        t
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let table = self.table();
        Ok(Manifest {
            scenario: self.spec.scenario.name().into(),
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.spec.parameters.seed,
            parameters: serde_json::json!({ "spec": self.spec, "grid": self.grid }),
            files: vec![FileEntry { file: table.file_name(), columns: table.columns.clone() }],
            summary: BTreeMap::new(),
            notes: self
                .rows
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| format!("{} = {}: {e}", self.grid.parameter.name(), r.value)))
                .collect(),
        })
    }

    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        Ok(vec![self.table().write_to(dir)?, self.manifest()?.write_to(dir)?])
    }
}

fn point_spec(base: &ExperimentSpec, parameter: SweepParameter, value: f64) -> Result<ExperimentSpec> {
    let mut spec = base.clone();
    let p = &mut spec.parameters;
    match parameter {
        SweepParameter::Dimension => {
            if !(value >= 2.0 && value.fract() == 0.0 && value <= 1e9) {
                return Err(Error::InvalidArgument(format!("dimension must be an integer >= 2, got {value}")));
            }
            p.d = value as usize;
            if spec.scenario == Scenario::ReluVsSoftmax {
                p.gamma0 = DIMENSION_ALIGNMENT / value.sqrt();
                p.dims.clear();
            }
        }
        SweepParameter::TotalStrength => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidArgument(format!("total strength must be positive, got {value}")));
            }
            let old = p.total_strength();
            let scale = value / old;
            p.lambdas.iter_mut().for_each(|l| *l *= scale);
            p.splits.iter_mut().flatten().for_each(|l| *l *= scale);
            if spec.scenario == Scenario::Convergence {
                // Weaker heads need proportionally longer to reach the fit window.
                p.t_end *= (old / value).max(1.0);
                p.total_strengths.clear();
            }
        }
        SweepParameter::Beta => p.beta = value,
        SweepParameter::Gamma0 => p.gamma0 = value,
    }
    spec.validate()?;
    Ok(spec)
}

/// Runs `base` at every grid value. A failing point leaves an error in its row.
pub fn sweep(base: &ExperimentSpec, grid: &SweepGrid) -> Result<SweepResult> {
    base.validate()?;
    if grid.values.is_empty() {
        return Err(Error::SpecValidation(vec!["grid: no values".into()]));
    }
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::SpecValidation(vec!["grid: values must be finite".into()]));
    }
    let rows = par_map(&grid.values, |&value| {
        match point_spec(base, grid.parameter, value).and_then(|s| run_scenario(&s)) {
            Ok(r) => SweepRow { value, summary: r.summary, error: None },
            Err(e) => SweepRow { value, summary: BTreeMap::new(), error: Some(e.to_string()) },
        }
    });
    Ok(SweepResult { spec: base.clone(), grid: grid.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_stay_in_row() {
        let mut spec = ExperimentSpec::defaults(Scenario::Custom);
        spec.parameters.t_end = 0.02;
        let r = sweep(&spec, &SweepGrid::new(SweepParameter::Beta, vec![1.0, -1.0, 2.0])).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows[0].error.is_none() && r.rows[2].error.is_none());
        assert!(r.rows[1].error.as_ref().unwrap().contains("beta"));
        let t = r.table();
        assert_eq!(t.rows[1][t.columns.len() - 1], 1.0);
        assert_eq!(r.manifest().unwrap().notes.len(), 1);
    }

    #[test]
    fn linear_grid_endpoints() {
        let g = SweepGrid::linear(SweepParameter::Beta, 0.5, 1.0, 6);
        assert_eq!(g.values.first(), Some(&0.5));
        assert_eq!(g.values.last(), Some(&1.0));
    }
}
