//! Attention heads, token configurations and the per-token softmax aggregations
//! that drive every dynamics variant.
//!
//! For head `h` with score matrix `M_h` and value matrix `W_h`, token `i` sees
//!
//! ```text
//!   s_ij   = <x_i, M_h x_j>
//!   Z_i^h  = sum_j exp(beta s_ij)
//!   g_i^h  = sum_j exp(beta s_ij) x_j          (unweighted aggregation)
//!   f_i^h  = sum_j exp(beta s_ij) W_h x_j      (aggregation)
//!   v_i    = (1/n) sum_h f_i^h                 (velocity)
//! ```
//!
//! Exponentials are evaluated with a per-row max shift. The reported partition
//! sums are the unshifted values; rows where those overflow are flagged and
//! their log-partition stays finite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decompose_raw, RadialTangential, UnitVector};
use crate::linalg::{max_abs, operator_norm};

/// Default tolerance for the structural condition checks.
pub const CONDITION_TOL: f64 = 1e-10;

/// One attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    score: DMatrix<f64>,
    scalar_strength: Option<f64>,
    /// `None` means the value matrix equals the score matrix.
    value: Option<DMatrix<f64>>,
    value_perturbation_norm: f64,
}

impl HeadSpec {
    /// `M = lambda I_d`.
    pub fn scalar(lambda: f64, d: usize) -> Self {
        Self {
            score: DMatrix::identity(d, d) * lambda,
            scalar_strength: Some(lambda),
            value: None,
            value_perturbation_norm: 0.0,
        }
    }

    /// General square score matrix, with values tied to scores.
    pub fn from_matrix(score: DMatrix<f64>) -> Result<Self> {
        if score.nrows() != score.ncols() {
            return Err(Error::InvalidArgument(format!(
                "score matrix must be square, got {}x{}",
                score.nrows(),
                score.ncols()
            )));
        }
        if score.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("score matrix has non-finite entries".into()));
        }
        Ok(Self { score, scalar_strength: None, value: None, value_perturbation_norm: 0.0 })
    }

    /// Orthogonal projection onto the span of the given coordinate axes.
    pub fn coordinate_projection(d: usize, axes: impl IntoIterator<Item = usize>) -> Self {
        let mut diag = DVector::zeros(d);
        for a in axes {
            diag[a] = 1.0;
        }
        Self::from_matrix(DMatrix::from_diagonal(&diag)).expect("diagonal matrix is square")
    }

    /// Replaces the value matrix; the perturbation norm `|W - M|_op` is measured here.
    pub fn with_value_matrix(mut self, value: DMatrix<f64>) -> Result<Self> {
        if value.shape() != self.score.shape() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: value.nrows() });
        }
        self.value_perturbation_norm = operator_norm(&(&value - &self.score));
        self.value = Some(value);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.score.nrows()
    }

    pub fn score_matrix(&self) -> &DMatrix<f64> {
        &self.score
    }

    pub fn value_matrix(&self) -> &DMatrix<f64> {
        self.value.as_ref().unwrap_or(&self.score)
    }

    pub fn scalar_strength(&self) -> Option<f64> {
        self.scalar_strength
    }

    pub fn value_perturbation_norm(&self) -> f64 {
        self.value_perturbation_norm
    }

    pub fn has_value_perturbation(&self) -> bool {
        self.value.is_some()
    }

    pub(crate) fn apply_score(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.scalar_strength {
            Some(lambda) => x * lambda,
            None => &self.score * x,
        }
    }

    pub(crate) fn apply_value(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.value {
            Some(w) => w * x,
            None => self.apply_score(x),
        }
    }
}

/// `n` tokens on S^{d-1} and the inverse temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenConfiguration {
    tokens: Vec<UnitVector>,
    beta: f64,
}

impl TokenConfiguration {
    pub fn new(tokens: Vec<UnitVector>, beta: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("at least one token is required".into()));
        }
        let d = tokens[0].dim();
        if d < 2 {
            return Err(Error::InvalidArgument(format!("dimension must be >= 2, got {d}")));
        }
        if let Some(bad) = tokens.iter().find(|t| t.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: bad.dim() });
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { tokens, beta })
    }

    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.tokens.clone(), beta)
    }

    pub fn tokens(&self) -> &[UnitVector] {
        &self.tokens
    }

    pub fn vectors(&self) -> Vec<DVector<f64>> {
        self.tokens.iter().map(|t| t.as_vector().clone()).collect()
    }

    /// Gram matrix `<x_i, x_j>`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.tokens[i].as_vector().dot(self.tokens[j].as_vector()))
    }

    /// Mean of `<x_i, x_j>` over unordered pairs `i < j`.
    pub fn mean_alignment(&self) -> f64 {
        let (sum, count) = self.pairwise().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if count == 0 { 1.0 } else { sum / count as f64 }
    }

    /// `max - min` of the pairwise alignments.
    pub fn alignment_spread(&self) -> f64 {
        let (lo, hi) = self
            .pairwise()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() { hi - lo } else { 0.0 }
    }

    fn pairwise(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| {
            (i + 1..n).map(move |j| self.tokens[i].as_vector().dot(self.tokens[j].as_vector()))
        })
    }
}

/// Every per-token, per-head quantity of the softmax aggregation.
///
/// Indexing is `[token][head]` (and `[token][head][partner]` for rows).
#[derive(Debug, Clone)]
pub struct FlowState {
    /// Positions the state was evaluated at (possibly off-sphere integrator stage points).
    pub tokens: Vec<DVector<f64>>,
    pub beta: f64,
    /// Every head has its value matrix equal to its score matrix.
    pub values_tied: bool,
    /// `f_i^h = sum_j e^{beta s_ij} W_h x_j`.
    pub aggregations: Vec<Vec<DVector<f64>>>,
    /// `M_h g_i^h`, the energy gradient direction. Equal to `aggregations` when values are tied to scores.
    pub gradient_aggregations: Vec<Vec<DVector<f64>>>,
    /// `g_i^h = sum_j e^{beta s_ij} x_j`.
    pub unweighted_aggregations: Vec<Vec<DVector<f64>>>,
    /// `sum_j p_ij^h W_h x_j`, always finite.
    pub attention_outputs: Vec<Vec<DVector<f64>>>,
    /// `v_i = (1/n) sum_h f_i^h`.
    pub velocities: Vec<DVector<f64>>,
    pub partition_sums: Vec<Vec<f64>>,
    pub log_partition_sums: Vec<Vec<f64>>,
    /// `Z_i = sum_h Z_i^h`.
    pub token_partition: Vec<f64>,
    pub log_token_partition: Vec<f64>,
    pub scores: Vec<Vec<Vec<f64>>>,
    pub attention_rows: Vec<Vec<Vec<f64>>>,
    /// Rows whose unshifted partition sum overflows.
    pub overflow: Vec<Vec<bool>>,
}

impl FlowState {
    pub fn n(&self) -> usize {
        self.velocities.len()
    }

    pub fn heads(&self) -> usize {
        self.aggregations.first().map_or(0, Vec::len)
    }

    pub fn any_overflow(&self) -> bool {
        self.overflow.iter().flatten().any(|&o| o)
    }

    /// Radial/tangential split of every `f_i^h` at its own token.
    pub fn radial_tangential(&self) -> Vec<Vec<RadialTangential>> {
        self.aggregations
            .iter()
            .zip(&self.tokens)
            .map(|(row, x)| row.iter().map(|f| decompose_raw(x, f)).collect())
            .collect()
    }
}

fn validate_heads(d: usize, heads: &[HeadSpec]) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("at least one head is required".into()));
    }
    if let Some(bad) = heads.iter().find(|h| h.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.dim() });
    }
    Ok(())
}

/// Aggregations, velocities, partition sums and attention rows for `cfg`.
pub fn compute_flow_state(cfg: &TokenConfiguration, heads: &[HeadSpec]) -> Result<FlowState> {
    flow_state_raw(&cfg.vectors(), cfg.beta(), heads)
}

/// Same as [`compute_flow_state`] on raw positions (integrator stage points).
pub(crate) fn flow_state_raw(xs: &[DVector<f64>], beta: f64, heads: &[HeadSpec]) -> Result<FlowState> {
    let n = xs.len();
    let d = xs[0].len();
    validate_heads(d, heads)?;
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }

    let nh = heads.len();
    let mut state = FlowState {
        tokens: xs.to_vec(),
        beta,
        values_tied: heads.iter().all(|h| !h.has_value_perturbation()),
        aggregations: vec![Vec::with_capacity(nh); n],
        gradient_aggregations: vec![Vec::with_capacity(nh); n],
        unweighted_aggregations: vec![Vec::with_capacity(nh); n],
        attention_outputs: vec![Vec::with_capacity(nh); n],
        velocities: vec![DVector::zeros(d); n],
        partition_sums: vec![Vec::with_capacity(nh); n],
        log_partition_sums: vec![Vec::with_capacity(nh); n],
        token_partition: vec![0.0; n],
        log_token_partition: vec![0.0; n],
        scores: vec![Vec::with_capacity(nh); n],
        attention_rows: vec![Vec::with_capacity(nh); n],
        overflow: vec![Vec::with_capacity(nh); n],
    };

    for head in heads {
        let mx: Vec<DVector<f64>> = xs.iter().map(|x| head.apply_score(x)).collect();
        let wx: Option<Vec<DVector<f64>>> = head
            .has_value_perturbation()
            .then(|| xs.iter().map(|x| head.apply_value(x)).collect());
        let values = wx.as_ref().unwrap_or(&mx);

        for i in 0..n {
            let scores: Vec<f64> = mx.iter().map(|m| xs[i].dot(m)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (beta * (s - max)).exp()).collect();
            let shifted_z: f64 = weights.iter().sum();
            let log_z = beta * max + shifted_z.ln();
            let scale = (beta * max).exp();
            let row: Vec<f64> = weights.iter().map(|w| w / shifted_z).collect();

            let mut g = DVector::zeros(d);
            let mut grad = DVector::zeros(d);
            let mut out = DVector::zeros(d);
            for j in 0..n {
                g.axpy(weights[j], &xs[j], 1.0);
                grad.axpy(weights[j], &mx[j], 1.0);
                out.axpy(row[j], &values[j], 1.0);
            }
            g *= scale;
            grad *= scale;
            let f = if wx.is_some() {
                let mut f = DVector::zeros(d);
                for j in 0..n {
                    f.axpy(weights[j], &values[j], 1.0);
                }
                f * scale
            } else {
                grad.clone()
            };

            let z = log_z.exp();
            state.overflow[i].push(!z.is_finite() || !scale.is_finite());
            state.partition_sums[i].push(z);
            state.log_partition_sums[i].push(log_z);
            state.scores[i].push(scores);
            state.attention_rows[i].push(row);
            state.unweighted_aggregations[i].push(g);
            state.gradient_aggregations[i].push(grad);
            state.attention_outputs[i].push(out);
            state.aggregations[i].push(f);
        }
    }

    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let mut v = DVector::zeros(d);
        for f in &state.aggregations[i] {
            v += f;
        }
        state.velocities[i] = v * inv_n;
        state.token_partition[i] = state.partition_sums[i].iter().sum();
        state.log_token_partition[i] = log_sum_exp(&state.log_partition_sums[i]);
    }
    Ok(state)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `|M_a M_b|_op` for an ordered head pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOrthogonality {
    pub first: usize,
    pub second: usize,
    pub delta: f64,
    pub orthogonal: bool,
}

/// Structural conditions on the score matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub tolerance: f64,
    pub score_symmetric: Vec<bool>,
    pub value_aligned: Vec<bool>,
    pub orthogonal_pairs: Vec<PairOrthogonality>,
    pub projection: Vec<bool>,
    pub radial_dominance: Option<RadialDominance>,
}

impl ConditionFlags {
    pub fn all_symmetric(&self) -> bool {
        self.score_symmetric.iter().all(|&b| b)
    }

    pub fn all_value_aligned(&self) -> bool {
        self.value_aligned.iter().all(|&b| b)
    }

    pub fn all_orthogonal(&self) -> bool {
        self.orthogonal_pairs.iter().all(|p| p.orthogonal)
    }

    pub fn all_projection(&self) -> bool {
        self.projection.iter().all(|&b| b)
    }

    /// Symmetric scores and tied values: the flow is a gradient flow of the total energy.
    pub fn gradient_flow(&self) -> bool {
        self.all_symmetric() && self.all_value_aligned()
    }

    /// All four structural conditions, which the per-head closed forms need.
    pub fn per_head_certified(&self) -> bool {
        self.gradient_flow() && self.all_orthogonal() && self.all_projection()
    }

    /// Largest `|M_{h'} M_h|_op` over `h' != h`.
    pub fn max_delta_into(&self, head: usize) -> f64 {
        self.orthogonal_pairs
            .iter()
            .filter(|p| p.second == head)
            .map(|p| p.delta)
            .fold(0.0, f64::max)
    }
}

/// Checks symmetry, value alignment, pairwise orthogonality and the projection property.
pub fn check_conditions(heads: &[HeadSpec], tolerance: f64) -> ConditionFlags {
    let score_symmetric = heads
        .iter()
        .map(|h| max_abs(&(h.score_matrix() - h.score_matrix().transpose())) <= tolerance)
        .collect();
    let value_aligned = heads
        .iter()
        .map(|h| max_abs(&(h.value_matrix() - h.score_matrix())) <= tolerance)
        .collect();
    let projection = heads
        .iter()
        .map(|h| {
            let m = h.score_matrix();
            max_abs(&(m * m - m)) <= tolerance
        })
        .collect();
    let mut orthogonal_pairs = Vec::new();
    for (a, ha) in heads.iter().enumerate() {
        for (b, hb) in heads.iter().enumerate() {
            if a == b {
                continue;
            }
            let delta = operator_norm(&(ha.score_matrix() * hb.score_matrix()));
            orthogonal_pairs.push(PairOrthogonality { first: a, second: b, delta, orthogonal: delta <= tolerance });
        }
    }
    ConditionFlags {
        tolerance,
        score_symmetric,
        value_aligned,
        orthogonal_pairs,
        projection,
        radial_dominance: None,
    }
}

/// Radial dominance margins `m_i^h = (b_i^h)^2 / |f_i^h| - sum_{h' != h} |a_i^{h'}|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialDominance {
    pub margins: Vec<Vec<f64>>,
    pub satisfied: Vec<Vec<bool>>,
}

impl RadialDominance {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().flatten().all(|&b| b)
    }

    pub fn head_satisfied(&self, head: usize) -> bool {
        self.satisfied.iter().all(|row| row[head])
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }
}

pub fn check_radial_dominance(state: &FlowState, cfg: &TokenConfiguration) -> Result<RadialDominance> {
    if state.n() != cfg.n() {
        return Err(Error::DimensionMismatch { expected: cfg.n(), got: state.n() });
    }
    Ok(radial_dominance_of(state))
}

pub(crate) fn radial_dominance_of(state: &FlowState) -> RadialDominance {
    let rt = state.radial_tangential();
    let mut margins = Vec::with_capacity(rt.len());
    let mut satisfied = Vec::with_capacity(rt.len());
    for (i, row) in rt.iter().enumerate() {
        let mut m_row = Vec::with_capacity(row.len());
        let mut s_row = Vec::with_capacity(row.len());
        for (h, own) in row.iter().enumerate() {
            let f_norm = state.aggregations[i][h].norm();
            if f_norm < crate::geometry::DEGENERATE_NORM {
                m_row.push(0.0);
                s_row.push(true);
                continue;
            }
            let cross: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != h)
                .map(|(_, other)| other.radial.abs())
                .sum();
            let margin = own.tangential_norm * own.tangential_norm / f_norm - cross;
            m_row.push(margin);
            s_row.push(margin >= 0.0);
        }
        margins.push(m_row);
        satisfied.push(s_row);
    }
    RadialDominance { margins, satisfied }
}

/// Radial shadows `a_i^h = <f_i^h, x_i>` and their cross-head sums `A_h^(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialShadows {
    pub radial: Vec<Vec<f64>>,
    pub cross: Vec<Vec<f64>>,
}

pub fn radial_shadows(state: &FlowState) -> RadialShadows {
    let radial: Vec<Vec<f64>> = state
        .aggregations
        .iter()
        .zip(&state.tokens)
        .map(|(row, x)| row.iter().map(|f| f.dot(x)).collect())
        .collect();
    let cross = radial
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|a| total - a).collect()
        })
        .collect();
    RadialShadows { radial, cross }
}
