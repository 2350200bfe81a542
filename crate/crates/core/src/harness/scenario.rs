//! Experiment specifications and the five reproducible scenarios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::output::{Column, FileEntry, Manifest, Table};
use super::{block_projection_heads, least_squares};
use crate::attention::{HeadSpec, TokenConfiguration};
use crate::dynamics::{equiangular_configuration, integrate, random_configuration, DynamicsKind, Schedule, TrajectoryRecord};
use crate::entropy::row_entropy;
use crate::equiangular::{clustering_time, integrate_reduced, ReducedKernel, ReducedModel, FIT_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::UnitVector;
use crate::oracle::flow_derivative;
use crate::thresholds::{inflection_strength, optimal_strength, rate_function, superadditivity_margin};

/// Typical overlap of two random unit vectors in `R^d` is of order `1/sqrt(d)`;
/// the dimension study starts at `DIMENSION_ALIGNMENT / sqrt(d)`.
pub const DIMENSION_ALIGNMENT: f64 = 0.5;
/// Horizon for the clustering-time searches.
pub const CLUSTERING_T_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AlignmentEnergy,
    Superadditivity,
    ReluVsSoftmax,
    EntropyPhases,
    Convergence,
    Custom,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::AlignmentEnergy,
        Scenario::Superadditivity,
        Scenario::ReluVsSoftmax,
        Scenario::EntropyPhases,
        Scenario::Convergence,
        Scenario::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::AlignmentEnergy => "alignment_energy",
            Scenario::Superadditivity => "superadditivity",
            Scenario::ReluVsSoftmax => "relu_vs_softmax",
            Scenario::EntropyPhases => "entropy_phases",
            Scenario::Convergence => "convergence",
            Scenario::Custom => "custom",
        }
    }

    /// Names of the tables this scenario can emit.
    pub fn series(self) -> &'static [&'static str] {
        match self {
            Scenario::AlignmentEnergy => &["alignment", "energy"],
            Scenario::Superadditivity => &["rate_function", "splits"],
            Scenario::ReluVsSoftmax => &["clustering", "dimension"],
            Scenario::EntropyPhases => &["entropy", "alignment"],
            Scenario::Convergence => &["convergence", "rate_sweep"],
            Scenario::Custom => &["alignment", "energy", "entropy", "conditions"],
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Scenario::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::SpecValidation(vec![format!("scenario: unknown value '{s}'")]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// `M_h = lambda_h I`.
    Scalar,
    /// `M_h = lambda_h P_h` with `P_h` the projection onto the h-th contiguous block of coordinates.
    BlockProjection,
    /// Explicit `score_matrices`.
    Matrices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Equiangular,
    Orthonormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub beta: f64,
    /// One strength per head.
    pub lambdas: Vec<f64>,
    pub head_layout: HeadLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_matrices: Option<Vec<Vec<Vec<f64>>>>,
    pub gamma0: f64,
    pub init: Init,
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    pub seed: u64,
    pub dynamics: DynamicsKind,
    pub target_gamma: f64,
    pub dims: Vec<usize>,
    /// Heterogeneous strength splits compared against the equal split.
    pub splits: Vec<Vec<f64>>,
    /// Total strengths for the late-rate sweep.
    pub total_strengths: Vec<f64>,
}

impl Parameters {
    fn base() -> Self {
        Self {
            n: 8,
            d: 8,
            heads: 1,
            beta: 1.0,
            lambdas: vec![1.0],
            head_layout: HeadLayout::Scalar,
            score_matrices: None,
            gamma0: 0.05,
            init: Init::Equiangular,
            dt: 1e-3,
            t_end: 10.0,
            sample_every: 10,
            seed: 0,
            dynamics: DynamicsKind::Sphere,
            target_gamma: 0.99,
            dims: Vec::new(),
            splits: Vec::new(),
            total_strengths: Vec::new(),
        }
    }

    /// Default parameter set of a scenario, matching the experiment it reproduces.
    pub fn defaults(scenario: Scenario) -> Self {
        let base = Self::base();
        match scenario {
            Scenario::AlignmentEnergy => Self {
                d: 20,
                heads: 2,
                lambdas: vec![1.0, 1.0],
                head_layout: HeadLayout::BlockProjection,
                init: Init::Random,
                seed: 1,
                ..base
            },
            Scenario::Superadditivity => Self {
                heads: 4,
                lambdas: vec![4.0; 4],
                splits: vec![
                    vec![3.5, 3.9, 4.1, 4.5],
                    vec![3.4, 3.7, 4.3, 4.6],
                    vec![3.6, 3.8, 4.0, 4.6],
                ],
                ..base
            },
            Scenario::ReluVsSoftmax => Self { t_end: 12.0, dims: vec![100, 1000, 10_000], ..base },
            Scenario::EntropyPhases => Self {
                beta: 1.5,
                t_end: 20.0,
                sample_every: 100,
                dynamics: DynamicsKind::HeadNormalized,
                ..base
            },
            Scenario::Convergence => Self {
                heads: 2,
                lambdas: vec![0.5, 1.5],
                gamma0: 0.8,
                t_end: 8.0,
                dynamics: DynamicsKind::HeadNormalized,
                total_strengths: vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
                ..base
            },
            Scenario::Custom => base,
        }
    }

    pub fn total_strength(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// Every violated constraint, by field name.
    pub fn problems(&self, scenario: Scenario) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push(format!("{field}: {msg}"));
        if self.n < 2 {
            bad("n", format!("need at least 2 tokens, got {}", self.n));
        }
        if self.d < 2 {
            bad("d", format!("need dimension at least 2, got {}", self.d));
        }
        if self.heads == 0 {
            bad("heads", "need at least one head".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad("beta", format!("must be positive and finite, got {}", self.beta));
        }
        if self.head_layout != HeadLayout::Matrices {
            if self.lambdas.len() != self.heads {
                bad("lambdas", format!("expected {} strengths, got {}", self.heads, self.lambdas.len()));
            }
            if self.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                bad("lambdas", "strengths must be positive and finite".into());
            }
        }
        match (self.head_layout, &self.score_matrices) {
            (HeadLayout::BlockProjection, _) if self.d < self.heads => {
                bad("head_layout", format!("block projections need d >= heads, got d={}", self.d));
            }
            (HeadLayout::Matrices, None) => bad("score_matrices", "required by head_layout = matrices".into()),
            (HeadLayout::Matrices, Some(ms)) => {
                if ms.len() != self.heads {
                    bad("score_matrices", format!("expected {} matrices, got {}", self.heads, ms.len()));
                }
                for (k, m) in ms.iter().enumerate() {
                    if m.len() != self.d || m.iter().any(|r| r.len() != self.d) {
                        bad("score_matrices", format!("matrix {k} is not {0}x{0}", self.d));
                    } else if m.iter().flatten().any(|v| !v.is_finite()) {
                        bad("score_matrices", format!("matrix {k} has non-finite entries"));
                    }
                }
            }
            (_, Some(_)) => bad("score_matrices", "only allowed with head_layout = matrices".into()),
            _ => {}
        }
        let lower = -1.0 / (self.n.max(2) as f64 - 1.0);
        if !(self.gamma0 > lower && self.gamma0 < 1.0) {
            bad("gamma0", format!("must lie in ({lower}, 1), got {}", self.gamma0));
        }
        if matches!(self.init, Init::Equiangular | Init::Orthonormal) && self.d < self.n {
            bad("init", format!("{:?} start needs d >= n, got d={}, n={}", self.init, self.d, self.n));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            bad("t_end", format!("must be positive, got {}", self.t_end));
        } else if self.t_end / self.dt > 1e8 {
            bad("t_end", "more than 1e8 steps requested".into());
        }
        if self.sample_every == 0 {
            bad("sample_every", "must be at least 1".into());
        }
        if !(self.target_gamma > self.gamma0 && self.target_gamma < 1.0) {
            bad("target_gamma", format!("must lie in (gamma0, 1), got {}", self.target_gamma));
        }
        if self.dims.iter().any(|&d| d < 2) {
            bad("dims", "dimensions must be at least 2".into());
        }
        if self.dims.iter().any(|&d| DIMENSION_ALIGNMENT / (d as f64).sqrt() >= self.target_gamma) {
            bad("dims", "starting alignment exceeds target_gamma".into());
        }
        for (k, s) in self.splits.iter().enumerate() {
            if s.len() != self.heads {
                bad("splits", format!("split {k} has {} strengths, expected {}", s.len(), self.heads));
            }
            if s.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                bad("splits", format!("split {k} has a non-positive strength"));
            }
            let total: f64 = s.iter().sum();
            if (total - self.total_strength()).abs() > 1e-9 * total.max(1.0) {
                bad("splits", format!("split {k} sums to {total}, expected {}", self.total_strength()));
            }
        }
        if self.total_strengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            bad("total_strengths", "must be positive".into());
        }
        if self.dynamics == DynamicsKind::Flat && matches!(scenario, Scenario::EntropyPhases | Scenario::Convergence) {
            bad("dynamics", "this scenario needs a dynamics on the sphere".into());
        }
        if matches!(scenario, Scenario::EntropyPhases | Scenario::Convergence) && self.head_layout != HeadLayout::Scalar {
            bad("head_layout", "this scenario is defined for scalar heads".into());
        }
        out
    }

    pub fn build_heads(&self) -> Result<Vec<HeadSpec>> {
        match self.head_layout {
            HeadLayout::Scalar => Ok(self.lambdas.iter().map(|&l| HeadSpec::scalar(l, self.d)).collect()),
            HeadLayout::BlockProjection => block_projection_heads(self.d, &self.lambdas),
            HeadLayout::Matrices => self
                .score_matrices
                .as_ref()
                .ok_or_else(|| Error::SpecValidation(vec!["score_matrices: missing".into()]))?
                .iter()
                .map(|rows| HeadSpec::from_matrix(DMatrix::from_fn(self.d, self.d, |r, c| rows[r][c])))
                .collect(),
        }
    }

    pub fn initial_configuration(&self) -> Result<TokenConfiguration> {
        match self.init {
            Init::Random => random_configuration(self.n, self.d, self.beta, self.seed),
            Init::Equiangular => equiangular_configuration(self.n, self.d, self.gamma0, self.beta),
            Init::Orthonormal => {
                TokenConfiguration::new((0..self.n).map(|i| UnitVector::basis(self.d, i)).collect(), self.beta)
            }
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.dt, self.t_end, self.sample_every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub parameters: Parameters,
    /// Requested table names; empty means every table of the scenario.
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl ExperimentSpec {
    pub fn defaults(scenario: Scenario) -> Self {
        Self { scenario, parameters: Parameters::defaults(scenario), outputs: Vec::new() }
    }

    /// Builds a spec from layered JSON documents: scenario defaults, then each
    /// layer in order. A layer is an object with optional `scenario`,
    /// `parameters` (possibly partial) and `outputs`.
    pub fn from_layers(layers: &[Value]) -> Result<Self> {
        let mut scenario = Scenario::Custom;
        for layer in layers {
            if !layer.is_object() {
                return Err(Error::SpecValidation(vec!["spec: expected a JSON object".into()]));
            }
            if let Some(s) = layer.get("scenario") {
                scenario = serde_json::from_value(s.clone())
                    .map_err(|e| Error::SpecValidation(vec![format!("scenario: {e}")]))?;
            }
        }
        let mut merged = serde_json::to_value(Self::defaults(scenario))?;
        for layer in layers {
            merge(&mut merged, layer);
        }
        let spec: Self = serde_json::from_value(merged).map_err(|e| Error::SpecValidation(vec![e.to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::SpecValidation(vec![format!("config: {e}")]))?;
        Self::from_layers(&[v])
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = self.parameters.problems(self.scenario);
        for o in &self.outputs {
            if !self.scenario.series().contains(&o.as_str()) {
                problems.push(format!(
                    "outputs: '{o}' is not a series of {}; available: {}",
                    self.scenario,
                    self.scenario.series().join(", ")
                ));
            }
        }
        if problems.is_empty() { Ok(()) } else { Err(Error::SpecValidation(problems)) }
    }

    fn wants(&self, series: &str) -> bool {
        self.outputs.is_empty() || self.outputs.iter().any(|o| o == series)
    }
}

fn merge(base: &mut Value, layer: &Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, l) => *b = l.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub spec: ExperimentSpec,
    /// The full-state run, for scenarios that simulate tokens.
    pub trajectory: Option<TrajectoryRecord>,
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl ScenarioResult {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            scenario: self.spec.scenario.name().into(),
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.spec.parameters.seed,
            parameters: serde_json::to_value(&self.spec)?,
            files: self
                .tables
                .iter()
                .map(|t| FileEntry { file: t.file_name(), columns: t.columns.clone() })
                .collect(),
            summary: self.summary.clone(),
            notes: self.notes.clone(),
        })
    }

    /// Writes every table and the manifest into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.tables.len() + 1);
        for t in &self.tables {
            files.push(t.write_to(dir)?);
        }
        files.push(self.manifest()?.write_to(dir)?);
        Ok(files)
    }
}

pub fn run_scenario(spec: &ExperimentSpec) -> Result<ScenarioResult> {
    spec.validate()?;
    let mut out = ScenarioResult {
        spec: spec.clone(),
        trajectory: None,
        tables: Vec::new(),
        summary: BTreeMap::new(),
        notes: Vec::new(),
    };
    match spec.scenario {
        Scenario::AlignmentEnergy => alignment_energy(&mut out)?,
        Scenario::Superadditivity => superadditivity(&mut out)?,
        Scenario::ReluVsSoftmax => relu_vs_softmax(&mut out)?,
        Scenario::EntropyPhases => entropy_phases(&mut out)?,
        Scenario::Convergence => convergence(&mut out)?,
        Scenario::Custom => custom(&mut out)?,
    }
    out.tables.retain(|t| spec.wants(&t.name));
    // JSON has no representation for non-finite numbers.
    out.summary.retain(|_, v| v.is_finite());
    Ok(out)
}

/// Runs the scenario and writes its files into `dir`.
pub fn run_scenario_to(spec: &ExperimentSpec, dir: &Path) -> Result<(ScenarioResult, Vec<PathBuf>)> {
    let result = run_scenario(spec)?;
    let files = result.write_to(dir)?;
    Ok((result, files))
}

fn simulate(p: &Parameters, schedule: Schedule) -> Result<(TokenConfiguration, Vec<HeadSpec>, TrajectoryRecord)> {
    let cfg = p.initial_configuration()?;
    let heads = p.build_heads()?;
    let rec = integrate(&cfg, &heads, p.dynamics, &schedule)?;
    Ok((cfg, heads, rec))
}

fn alignment_table(rec: &TrajectoryRecord) -> Table {
    let n = rec.final_positions.len();
    let mut cols = vec![
        Column::new("time", "time"),
        Column::new("mean_alignment", "cosine"),
        Column::new("alignment_spread", "cosine"),
    ];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if rec.pairwise_alignments.is_some() {
        cols.extend(pairs.iter().map(|(i, j)| Column::new(format!("pair_{i}_{j}"), "cosine")));
    }
    let mut t = Table::new("alignment", cols);
    for k in 0..rec.len() {
        let mut row = vec![rec.times[k], rec.mean_alignment[k], rec.alignment_spread[k]];
        if let Some(pw) = &rec.pairwise_alignments {
            row.extend(pairs.iter().map(|&(i, j)| pw[k][i][j]));
        }
        t.push(row);
    }
    t
}

fn energy_table(rec: &TrajectoryRecord) -> Table {
    let heads = rec.energies.first().map_or(0, |e| e.per_head.len());
    let mut cols = vec![Column::new("time", "time")];
    cols.extend((1..=heads).map(|h| Column::new(format!("energy_head_{h}"), "energy")));
    cols.extend([
        Column::new("energy_total", "energy"),
        Column::new("log_energy_total", "log energy"),
        Column::new("energy_rate", "energy/time"),
        Column::new("kinetic", "energy/time"),
        Column::new("log_partition", "energy"),
    ]);
    let mut t = Table::new("energy", cols);
    for (k, e) in rec.energies.iter().enumerate() {
        let mut row = vec![rec.times[k]];
        row.extend(&e.per_head);
        row.extend([e.total, e.log_total, e.rate_total_analytic.unwrap_or(f64::NAN), e.kinetic, e.log_partition]);
        t.push(row);
    }
    t
}

fn entropy_table(rec: &TrajectoryRecord, identity_residual: Option<&[f64]>) -> Table {
    let mut cols = vec![
        Column::new("time", "time"),
        Column::new("mean_entropy", "nats"),
        Column::new("min_entropy", "nats"),
        Column::new("mean_entropy_rate", "nats/time"),
        Column::new("min_entropy_rate", "nats/time"),
    ];
    if identity_residual.is_some() {
        cols.push(Column::new("identity_residual", "nats/time"));
    }
    let mut t = Table::new("entropy", cols);
    let mean = rec.mean_entropy();
    let rate = rec.mean_entropy_production();
    for k in 0..rec.len() {
        let min_h = rec.entropies[k].iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let min_r = rec.entropy_production[k].iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let mut row = vec![rec.times[k], mean[k], min_h, rate[k], min_r];
        if let Some(r) = identity_residual {
            row.push(r[k]);
        }
        t.push(row);
    }
    t
}

fn conditions_table(rec: &TrajectoryRecord) -> Table {
    let mut t = Table::new(
        "conditions",
        vec![
            Column::new("time", "time"),
            Column::new("min_tau_margin", "energy"),
            Column::new("tau_ok", "bool"),
            Column::new("sphere_drift", "length"),
        ],
    );
    for k in 0..rec.len() {
        t.push(vec![
            rec.times[k],
            rec.min_tau_margin[k],
            f64::from(u8::from(rec.condition_tau_ok[k])),
            rec.sphere_drift[k],
        ]);
    }
    t
}

/// Smallest increment of a series; negative when it ever decreases.
fn min_increment(xs: &[f64]) -> f64 {
    xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn trajectory_summary(rec: &TrajectoryRecord, s: &mut BTreeMap<String, f64>) {
    let last = rec.len() - 1;
    s.insert("final_mean_alignment".into(), rec.mean_alignment[last]);
    s.insert("final_energy_total".into(), rec.energies[last].total);
    s.insert("min_energy_increment".into(), min_increment(&rec.total_energy()));
    s.insert("initial_tau_margin".into(), rec.min_tau_margin[0]);
    s.insert("initial_tau_ok".into(), f64::from(u8::from(rec.condition_tau_ok[0])));
    s.insert("t_crit".into(), rec.t_crit.unwrap_or(f64::NAN));
    s.insert("max_sphere_drift".into(), rec.sphere_drift.iter().cloned().fold(0.0, f64::max));
}

fn alignment_energy(out: &mut ScenarioResult) -> Result<()> {
    let p = &out.spec.parameters;
    let (_, _, rec) = simulate(p, p.schedule().with_pairwise())?;
    trajectory_summary(&rec, &mut out.summary);
    let heads = p.heads;
    let mut decreasing = 0.0;
    for h in 0..heads {
        let series: Vec<f64> = rec.energies.iter().map(|e| e.per_head[h]).collect();
        let inc = min_increment(&series);
        out.summary.insert(format!("min_energy_increment_head_{}", h + 1), inc);
        if inc < 0.0 {
            decreasing += 1.0;
        }
    }
    out.summary.insert("heads_with_decrease".into(), decreasing);
    out.tables.push(alignment_table(&rec));
    out.tables.push(energy_table(&rec));
    out.trajectory = Some(rec);
    Ok(())
}

/// Grid of strengths for the rate-function table.
const RATE_GRID_STEP: f64 = 0.01;
const RATE_GRID_MAX: f64 = 8.0;

fn superadditivity(out: &mut ScenarioResult) -> Result<()> {
    let p = &out.spec.parameters;
    let (beta, n) = (p.beta, p.n);
    let mut rf = Table::new(
        "rate_function",
        vec![
            Column::new("lambda", "strength"),
            Column::new("phi", "1/time"),
            Column::new("phi_d1", "1/time"),
            Column::new("phi_d2", "1/time"),
        ],
    );
    let steps = (RATE_GRID_MAX / RATE_GRID_STEP).round() as usize;
    for k in 1..=steps {
        let l = k as f64 * RATE_GRID_STEP;
        let r = rate_function(l, beta, n);
        rf.push(vec![l, r.phi, r.d1, r.d2]);
    }
    let lambda_star = optimal_strength(beta, n)?;
    let lambda_c = inflection_strength(beta, n)?;
    out.summary.insert("lambda_star".into(), lambda_star);
    out.summary.insert("lambda_star_beta".into(), lambda_star * beta);
    out.summary.insert("lambda_c".into(), lambda_c);
    out.summary.insert("phi_max".into(), rate_function(lambda_star, beta, n).phi);

    let mut cols = vec![Column::new("split", "index")];
    cols.extend((1..=p.heads).map(|h| Column::new(format!("lambda_{h}"), "strength")));
    cols.extend([
        Column::new("sum_phi", "1/time"),
        Column::new("equal_sum_phi", "1/time"),
        Column::new("margin", "1/time"),
        Column::new("quantitative_condition_ok", "bool"),
    ]);
    let mut sp = Table::new("splits", cols);
    let equal = superadditivity_margin(&p.lambdas, beta, n)?;
    let equal_sum: f64 = p.lambdas.iter().map(|&l| rate_function(l, beta, n).phi).sum();
    out.summary.insert("mean_strength".into(), equal.mean_strength);
    let mut min_margin = f64::INFINITY;
    for (k, split) in p.splits.iter().enumerate() {
        let m = superadditivity_margin(split, beta, n)?;
        let mut row = vec![k as f64];
        row.extend(split);
        row.extend([m.margin + equal_sum, equal_sum, m.margin, f64::from(u8::from(m.quantitative_condition_ok))]);
        sp.push(row);
        out.summary.insert(format!("margin_split_{}", k + 1), m.margin);
        min_margin = min_margin.min(m.margin);
    }
    if !p.splits.is_empty() {
        out.summary.insert("min_margin".into(), min_margin);
    }
    out.tables.push(rf);
    out.tables.push(sp);
    Ok(())
}

/// Clustering times of the reduced ODE under the unnormalized softmax and ReLU kernels.
fn relu_vs_softmax(out: &mut ScenarioResult) -> Result<()> {
    let p = &out.spec.parameters;
    let softmax = ReducedModel::new(ReducedKernel::SoftmaxUnnormalized, p.lambdas.clone(), p.beta, p.n)?;
    let relu = ReducedModel::new(ReducedKernel::Relu, p.lambdas.clone(), p.beta, p.n)?;
    let t_soft = clustering_time(&softmax, p.gamma0, p.target_gamma, p.dt, CLUSTERING_T_MAX)?;
    let t_relu = clustering_time(&relu, p.gamma0, p.target_gamma, p.dt, CLUSTERING_T_MAX)?;
    out.summary.insert("t_softmax".into(), t_soft);
    out.summary.insert("t_relu".into(), t_relu);
    out.summary.insert("time_ratio".into(), t_relu / t_soft);
    out.summary.insert("relu_rate_at_zero".into(), relu.rate(0.0));

    let a = integrate_reduced(&softmax, p.gamma0, p.dt, p.t_end)?;
    let b = integrate_reduced(&relu, p.gamma0, p.dt, p.t_end)?;
    let mut cl = Table::new(
        "clustering",
        vec![
            Column::new("time", "time"),
            Column::new("gamma_softmax", "cosine"),
            Column::new("gamma_relu", "cosine"),
        ],
    );
    for k in (0..a.times.len()).step_by(p.sample_every) {
        cl.push(vec![a.times[k], a.gammas[k], b.gammas[k]]);
    }
    out.tables.push(cl);

    let mut dim = Table::new(
        "dimension",
        vec![
            Column::new("d", "count"),
            Column::new("gamma0", "cosine"),
            Column::new("t_relu", "time"),
            Column::new("t_softmax", "time"),
        ],
    );
    let mut pts = Vec::new();
    for &d in &p.dims {
        let g0 = DIMENSION_ALIGNMENT / (d as f64).sqrt();
        let tr = clustering_time(&relu, g0, p.target_gamma, p.dt, CLUSTERING_T_MAX)?;
        let ts = clustering_time(&softmax, g0, p.target_gamma, p.dt, CLUSTERING_T_MAX)?;
        dim.push(vec![d as f64, g0, tr, ts]);
        pts.push((g0, tr, ts));
    }
    if pts.len() >= 2 {
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        let k = 2.0 * p.lambdas.iter().map(|l| l * l).sum::<f64>() / p.n as f64;
        out.summary.insert("t_relu_difference".into(), last.1 - first.1);
        out.summary.insert("t_relu_difference_linearized".into(), (first.0 / last.0).ln() / k);
        out.summary.insert("t_softmax_difference".into(), last.2 - first.2);
        let xs: Vec<f64> = pts.iter().map(|q| -q.0.ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|q| q.1).collect();
        if let Some((slope, _)) = least_squares(&xs, &ys) {
            out.summary.insert("t_relu_log_slope".into(), slope);
        }
    }
    out.tables.push(dim);
    Ok(())
}

fn entropy_phases(out: &mut ScenarioResult) -> Result<()> {
    let p = out.spec.parameters.clone();
    let (_, heads, mut rec) = simulate(&p, p.schedule().with_positions())?;
    let positions = rec.positions.take().unwrap_or_default();
    let residuals = positions
        .iter()
        .zip(rec.mean_entropy_production())
        .map(|(pos, analytic)| {
            let tokens = pos.iter().map(|x| UnitVector::try_from(x.clone())).collect::<Result<Vec<_>>>()?;
            let cfg = TokenConfiguration::new(tokens, p.beta)?;
            let fd = flow_derivative(&cfg, &heads, p.dynamics, |xs| {
                let st = crate::attention::flow_state_raw(xs, p.beta, &heads)?;
                let all: Vec<f64> = st.attention_rows.iter().flatten().map(|row| row_entropy(row)).collect();
                Ok(all.iter().sum::<f64>() / all.len() as f64)
            })?;
            Ok((fd - analytic).abs())
        })
        .collect::<Result<Vec<f64>>>()?;

    trajectory_summary(&rec, &mut out.summary);
    let mean = rec.mean_entropy();
    let rate = rec.mean_entropy_production();
    let last = rec.len() - 1;
    let log_n = (p.n as f64).ln();
    let (peak_k, peak) = rate.iter().cloned().enumerate().fold((0, f64::NEG_INFINITY), |a, (k, v)| if v > a.1 { (k, v) } else { a });
    out.summary.insert("log_n".into(), log_n);
    out.summary.insert("initial_mean_entropy".into(), mean[0]);
    out.summary.insert("final_mean_entropy".into(), mean[last]);
    out.summary.insert("final_entropy_gap".into(), (mean[last] - log_n).abs());
    out.summary.insert("min_entropy_increment".into(), min_increment(&mean));
    out.summary.insert("min_entropy_rate".into(), rec.entropy_production.iter().flatten().flatten().cloned().fold(f64::INFINITY, f64::min));
    out.summary.insert("peak_entropy_rate".into(), peak);
    out.summary.insert("t_peak_entropy_rate".into(), rec.times[peak_k]);
    out.summary.insert("final_entropy_rate".into(), rate[last]);
    out.summary.insert("max_identity_residual".into(), residuals.iter().cloned().fold(0.0, f64::max));
    out.tables.push(entropy_table(&rec, Some(&residuals)));
    out.tables.push(alignment_table(&rec));
    out.trajectory = Some(rec);
    Ok(())
}

/// Slope of `-log y` against time over the samples where `mask` holds.
fn decay_rate(times: &[f64], ys: &[f64], mask: impl Fn(usize) -> bool) -> Option<f64> {
    let (xs, ls): (Vec<f64>, Vec<f64>) =
        (0..times.len()).filter(|&k| mask(k) && ys[k] > 0.0).map(|k| (times[k], ys[k].ln())).unzip();
    if xs.len() < 3 {
        return None;
    }
    least_squares(&xs, &ls).map(|(s, _)| -s)
}

fn reduced_late_rate(lambdas: &[f64], beta: f64, n: usize, gamma0: f64, dt: f64) -> Result<Option<f64>> {
    let model = ReducedModel::new(ReducedKernel::Softmax, lambdas.to_vec(), beta, n)?;
    let total: f64 = lambdas.iter().sum();
    // Long enough to reach the bottom of the fit window from any start.
    let t_end = (FIT_WINDOW.0.ln().abs() + 12.0) / total;
    let dt = dt.min(0.01 / total);
    let tr = integrate_reduced(&model, gamma0, dt, t_end)?;
    Ok(crate::equiangular::fit_decay_rate(&tr.times, &tr.epsilons(), FIT_WINDOW))
}

fn convergence(out: &mut ScenarioResult) -> Result<()> {
    let p = out.spec.parameters.clone();
    let (_, _, rec) = simulate(&p, p.schedule())?;
    trajectory_summary(&rec, &mut out.summary);
    let total = p.total_strength();
    let model = ReducedModel::new(ReducedKernel::Softmax, p.lambdas.clone(), p.beta, p.n)?;
    let reduced = integrate_reduced(&model, p.gamma0, p.dt, p.t_end)?;

    let eps: Vec<f64> = rec.mean_alignment.iter().map(|g| 1.0 - g).collect();
    let equilibrium: Vec<f64> = p.lambdas.iter().map(|&l| (p.beta * l).exp() / (2.0 * p.beta)).collect();
    let gaps: Vec<Vec<f64>> =
        (0..p.heads).map(|h| rec.energies.iter().map(|e| equilibrium[h] - e.per_head[h]).collect()).collect();

    let mut cols = vec![
        Column::new("time", "time"),
        Column::new("epsilon", "cosine"),
        Column::new("epsilon_reduced", "cosine"),
    ];
    cols.extend((1..=p.heads).map(|h| Column::new(format!("energy_gap_head_{h}"), "energy")));
    cols.extend((1..=p.heads).map(|h| Column::new(format!("energy_gap_closed_head_{h}"), "energy")));
    let mut t = Table::new("convergence", cols);
    for k in 0..rec.len() {
        let mut row = vec![rec.times[k], eps[k], reduced.gamma_at(rec.times[k]).map_or(f64::NAN, |g| 1.0 - g)];
        row.extend(gaps.iter().map(|g| g[k]));
        row.extend(
            p.lambdas.iter().map(|&l| crate::equiangular::energy_gap(l, p.beta, p.n, rec.mean_alignment[k])),
        );
        t.push(row);
    }
    out.tables.push(t);

    let in_window = |k: usize| eps[k] >= FIT_WINDOW.0 && eps[k] <= FIT_WINDOW.1;
    let fitted = decay_rate(&rec.times, &eps, in_window);
    out.summary.insert("predicted_rate".into(), 2.0 * total);
    out.summary.insert("fitted_rate".into(), fitted.unwrap_or(f64::NAN));
    if fitted.is_none() {
        out.notes.push("epsilon did not enter the fit window; increase t_end".into());
    }
    for (h, g) in gaps.iter().enumerate() {
        let r = decay_rate(&rec.times, g, in_window);
        out.summary.insert(format!("fitted_rate_head_{}", h + 1), r.unwrap_or(f64::NAN));
    }
    let sup = rec
        .times
        .iter()
        .zip(&rec.mean_alignment)
        .filter_map(|(&tt, &g)| reduced.gamma_at(tt).map(|r| (r - g).abs()))
        .fold(0.0, f64::max);
    out.summary.insert("reduction_sup_error".into(), sup);

    let mut sw = Table::new(
        "rate_sweep",
        vec![
            Column::new("total_strength", "strength"),
            Column::new("fitted_rate", "1/time"),
            Column::new("predicted_rate", "1/time"),
        ],
    );
    let mut fits = Vec::new();
    for &big in &p.total_strengths {
        let scaled: Vec<f64> = p.lambdas.iter().map(|l| l * big / total).collect();
        let r = reduced_late_rate(&scaled, p.beta, p.n, p.gamma0, p.dt)?.unwrap_or(f64::NAN);
        sw.push(vec![big, r, 2.0 * big]);
        if r.is_finite() {
            fits.push((2.0 * big, r));
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = fits.into_iter().unzip();
    if let Some((slope, _)) = least_squares(&xs, &ys) {
        out.summary.insert("sweep_slope".into(), slope);
    }
    out.tables.push(sw);
    out.trajectory = Some(rec);
    Ok(())
}

fn custom(out: &mut ScenarioResult) -> Result<()> {
    let p = &out.spec.parameters;
    let (_, _, rec) = simulate(p, p.schedule())?;
    trajectory_summary(&rec, &mut out.summary);
    out.summary.insert("final_mean_entropy".into(), *rec.mean_entropy().last().unwrap_or(&f64::NAN));
    if let Some(t) = rec.halted_at {
        out.summary.insert("halted_at".into(), t);
    }
    out.tables.push(alignment_table(&rec));
    out.tables.push(energy_table(&rec));
    out.tables.push(entropy_table(&rec, None));
    out.tables.push(conditions_table(&rec));
    out.trajectory = Some(rec);
    Ok(())
}
