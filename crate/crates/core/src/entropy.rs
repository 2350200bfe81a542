//! Attention entropy and its production rate.
//!
//! For a row `p_j = softmax(beta s_j)` the entropy `H = -sum_j p_j log p_j`
//! obeys `dH/dt = -beta^2 Cov_p(s, ds/dt)` exactly, whatever moves the tokens.
//! The score velocity splits into `ds_j^I = <dx_i, M x_j>` (the query token
//! moving) and `ds_j^II = <M^T x_i, dx_j>` (the partner moving).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attention::{check_conditions, FlowState, HeadSpec, CONDITION_TOL};
use crate::dynamics::{token_derivatives, DynamicsKind};
use crate::error::{Error, Result};
use crate::geometry::project_raw;

/// Slack on the Condition E comparison.
pub const CONDITION_E_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// `[token][head]`.
    pub entropy: Vec<Vec<f64>>,
    /// `[token][head][partner]`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub score_velocities_self: Vec<Vec<Vec<f64>>>,
    pub score_velocities_partner: Vec<Vec<Vec<f64>>>,
    /// `Cov_p(s, ds)`.
    pub covariance: Vec<Vec<f64>>,
    /// `Cov_p(s, ds^I)`.
    pub covariance_self: Vec<Vec<f64>>,
    /// `Cov_p(s, ds^II)`.
    pub covariance_partner: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    /// `A_h^(i) = sum_{h' != h} <f_i^{h'}, x_i>`.
    pub cross_shadow: Vec<Vec<f64>>,
    /// `-beta^2 Cov_p(s, ds)`.
    pub production_rate: Vec<Vec<f64>>,
}

/// `-sum_j p_j log p_j` with `0 log 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

/// `E_p[a b] - E_p[a] E_p[b]`.
pub fn weighted_covariance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut eab = 0.0;
    let mut ea = 0.0;
    let mut eb = 0.0;
    for j in 0..p.len() {
        eab += p[j] * a[j] * b[j];
        ea += p[j] * a[j];
        eb += p[j] * b[j];
    }
    eab - ea * eb
}

fn partners(head: &HeadSpec, xs: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mx: Vec<DVector<f64>> = xs.iter().map(|x| head.apply_score(x)).collect();
    let mtx = if head.scalar_strength().is_some() {
        mx.clone()
    } else {
        let mt = head.score_matrix().transpose();
        xs.iter().map(|x| &mt * x).collect()
    };
    (mx, mtx)
}

/// Entropies, score velocities and covariances for the given token derivatives.
pub fn entropy_report(state: &FlowState, heads: &[HeadSpec], derivs: &[DVector<f64>]) -> Result<EntropyReport> {
    let n = state.n();
    if derivs.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: derivs.len() });
    }
    if heads.len() != state.heads() {
        return Err(Error::InvalidArgument(format!("state has {} heads, got {}", state.heads(), heads.len())));
    }
    let nh = heads.len();
    let mut rep = EntropyReport {
        entropy: vec![vec![0.0; nh]; n],
        scores: vec![Vec::with_capacity(nh); n],
        score_velocities_self: vec![Vec::with_capacity(nh); n],
        score_velocities_partner: vec![Vec::with_capacity(nh); n],
        covariance: vec![vec![0.0; nh]; n],
        covariance_self: vec![vec![0.0; nh]; n],
        covariance_partner: vec![vec![0.0; nh]; n],
        variance: vec![vec![0.0; nh]; n],
        cross_shadow: vec![vec![0.0; nh]; n],
        production_rate: vec![vec![0.0; nh]; n],
    };
    let beta2 = state.beta * state.beta;
    for (h, head) in heads.iter().enumerate() {
        let (mx, mtx) = partners(head, &state.tokens);
        for i in 0..n {
            let p = &state.attention_rows[i][h];
            let s = &state.scores[i][h];
            let ds1: Vec<f64> = mx.iter().map(|m| derivs[i].dot(m)).collect();
            let ds2: Vec<f64> = derivs.iter().map(|d| mtx[i].dot(d)).collect();
            let ds: Vec<f64> = ds1.iter().zip(&ds2).map(|(a, b)| a + b).collect();
            let cov = weighted_covariance(p, s, &ds);
            rep.entropy[i][h] = row_entropy(p);
            rep.covariance[i][h] = cov;
            rep.covariance_self[i][h] = weighted_covariance(p, s, &ds1);
            rep.covariance_partner[i][h] = weighted_covariance(p, s, &ds2);
            rep.variance[i][h] = weighted_covariance(p, s, s);
            rep.production_rate[i][h] = -beta2 * cov;
            rep.scores[i].push(s.clone());
            rep.score_velocities_self[i].push(ds1);
            rep.score_velocities_partner[i].push(ds2);
        }
    }
    for i in 0..n {
        let radial: Vec<f64> = state.aggregations[i].iter().map(|f| f.dot(&state.tokens[i])).collect();
        let total: f64 = radial.iter().sum();
        for h in 0..nh {
            rep.cross_shadow[i][h] = total - radial[h];
        }
    }
    Ok(rep)
}

/// `Cov_p(s, ds)` for a scalar head on an equiangular state:
/// `p_i (1 - p_i) lambda (1 - gamma) (-lambda dgamma/dt)`.
pub fn two_group_covariance(lambda: f64, beta: f64, gamma: f64, n: usize, gamma_dot: f64) -> f64 {
    let p_self = 1.0 / (1.0 + (n as f64 - 1.0) * (-lambda * beta * (1.0 - gamma)).exp());
    p_self * (1.0 - p_self) * lambda * (1.0 - gamma) * (-lambda * gamma_dot)
}

fn require_certified(heads: &[HeadSpec]) -> Result<()> {
    let flags = check_conditions(heads, CONDITION_TOL);
    if !flags.per_head_certified() {
        return Err(Error::NotCertified(
            "heads must be symmetric, value-aligned, mutually orthogonal projections".into(),
        ));
    }
    Ok(())
}

fn check_indices(state: &FlowState, heads: &[HeadSpec], token: usize, head: usize) -> Result<()> {
    if heads.len() != state.heads() || token >= state.n() || head >= heads.len() {
        return Err(Error::InvalidArgument(format!("token {token} / head {head} out of range")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossHeadCovariance {
    /// `Cov_p(s_j, <dx_i^{(-h)}, M_h x_j>)` with `dx_i^{(-h)} = (1/n) sum_{h' != h} P(f_i^{h'})`.
    pub measured: f64,
    /// `-(A_h^(i) / n) Var_p(s)`.
    pub predicted: f64,
    pub cross_shadow: f64,
}

/// Cross-head part of `Cov(s, ds^I)` under sphere dynamics.
pub fn cross_head_covariance(state: &FlowState, heads: &[HeadSpec], token: usize, head: usize) -> Result<CrossHeadCovariance> {
    check_indices(state, heads, token, head)?;
    require_certified(heads)?;
    let n = state.n() as f64;
    let x = &state.tokens[token];
    let mut others = DVector::zeros(x.len());
    let mut shadow = 0.0;
    for (k, f) in state.aggregations[token].iter().enumerate() {
        if k != head {
            others += project_raw(x, f);
            shadow += f.dot(x);
        }
    }
    others /= n;
    let p = &state.attention_rows[token][head];
    let s = &state.scores[token][head];
    let t: Vec<f64> = state.tokens.iter().map(|xj| others.dot(&heads[head].apply_score(xj))).collect();
    Ok(CrossHeadCovariance {
        measured: weighted_covariance(p, s, &t),
        predicted: -shadow / n * weighted_covariance(p, s, s),
        cross_shadow: shadow,
    })
}

/// Both sides of Condition E and the three-term split of `dH_i^h/dt` under sphere dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionE {
    /// `Cov_single(s, ds^single)`, the covariance the head would produce alone.
    pub lhs: f64,
    /// `A_h^(i) Var(s) + sum_{h' != h} Cov(s_j, a_j^{h'} s_j)`.
    pub rhs: f64,
    /// `lhs >= rhs`, the inequality as stated; it makes the split non-positive.
    pub ok: bool,
    /// `lhs <= rhs`: the split is non-negative, so entropy does not decrease.
    pub entropy_nondecreasing: bool,
    /// Partner-moving part of the single-head covariance.
    pub single_partner_covariance: f64,
    /// `[-beta^2/n Cov_single, beta^2 A/n Var, beta^2/n sum Cov(s, a s)]`.
    pub terms: [f64; 3],
    /// `-beta^2 Cov(s, ds)` with the full sphere velocities.
    pub production_rate: f64,
}

pub fn check_condition_e(state: &FlowState, heads: &[HeadSpec], token: usize, head: usize) -> Result<ConditionE> {
    check_indices(state, heads, token, head)?;
    require_certified(heads)?;
    let n = state.n();
    let nf = n as f64;
    let beta2 = state.beta * state.beta;
    let (mx, _) = partners(&heads[head], &state.tokens);
    let single: Vec<DVector<f64>> = (0..n).map(|k| project_raw(&state.tokens[k], &state.aggregations[k][head])).collect();
    let shadow_at = |k: usize| -> f64 {
        state.aggregations[k]
            .iter()
            .enumerate()
            .filter(|&(h2, _)| h2 != head)
            .map(|(_, f)| f.dot(&state.tokens[k]))
            .sum()
    };

    let p = &state.attention_rows[token][head];
    let s = &state.scores[token][head];
    let ds1: Vec<f64> = mx.iter().map(|m| single[token].dot(m)).collect();
    let ds2: Vec<f64> = single.iter().map(|y| mx[token].dot(y)).collect();
    let ds: Vec<f64> = ds1.iter().zip(&ds2).map(|(a, b)| a + b).collect();
    let cov_single = weighted_covariance(p, s, &ds);
    let var = weighted_covariance(p, s, s);
    let a_i = shadow_at(token);
    let weighted: Vec<f64> = (0..n).map(|j| shadow_at(j) * s[j]).collect();
    let cross = weighted_covariance(p, s, &weighted);

    let derivs = token_derivatives(state, DynamicsKind::Sphere)?;
    let full = entropy_report_single(state, &mx, &derivs, token, head);

    let lhs = cov_single;
    let rhs = a_i * var + cross;
    Ok(ConditionE {
        lhs,
        rhs,
        ok: lhs >= rhs - CONDITION_E_TOL,
        entropy_nondecreasing: lhs <= rhs + CONDITION_E_TOL,
        single_partner_covariance: weighted_covariance(p, s, &ds2),
        terms: [-beta2 / nf * cov_single, beta2 * a_i / nf * var, beta2 / nf * cross],
        production_rate: -beta2 * full,
    })
}

fn entropy_report_single(state: &FlowState, mx: &[DVector<f64>], derivs: &[DVector<f64>], i: usize, h: usize) -> f64 {
    let ds: Vec<f64> = (0..state.n())
        .map(|j| derivs[i].dot(&mx[j]) + mx[i].dot(&derivs[j]))
        .collect();
    weighted_covariance(&state.attention_rows[i][h], &state.scores[i][h], &ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compute_flow_state, TokenConfiguration};
    use crate::dynamics::{equiangular_configuration, random_configuration};
    use crate::geometry::UnitVector;

    #[test]
    fn clustered_entropy_is_log_n() {
        let cfg = TokenConfiguration::new(vec![UnitVector::basis(3, 0); 5], 1.0).unwrap();
        let heads = [HeadSpec::scalar(1.0, 3)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let d = token_derivatives(&state, DynamicsKind::Sphere).unwrap();
        let r = entropy_report(&state, &heads, &d).unwrap();
        assert!((r.entropy[0][0] - 5f64.ln()).abs() < 1e-14);
        assert_eq!(r.production_rate[0][0], 0.0);
        assert!(r.score_velocities_self[0][0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equiangular_score_velocities() {
        let (n, lambda, beta, gamma) = (6, 1.0, 1.2, 0.3);
        let cfg = equiangular_configuration(n, n, gamma, beta).unwrap();
        let heads = [HeadSpec::scalar(lambda, n)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let d = token_derivatives(&state, DynamicsKind::Sphere).unwrap();
        let r = entropy_report(&state, &heads, &d).unwrap();
        let gamma_dot = crate::equiangular::unnormalized_softmax_rate(gamma, lambda, beta, n);
        let ds: Vec<f64> = (0..n)
            .map(|j| r.score_velocities_self[0][0][j] + r.score_velocities_partner[0][0][j])
            .collect();
        assert!(ds[0].abs() < 1e-14);
        assert!(r.score_velocities_partner[0][0][0].abs() < 1e-14);
        for &v in &ds[1..] {
            assert!((v - lambda * gamma_dot).abs() < 1e-12);
        }
        let closed = two_group_covariance(lambda, beta, gamma, n, gamma_dot);
        assert!((closed - r.covariance[0][0]).abs() < 1e-10);
        assert!(closed < 0.0);
        assert!(r.covariance_self[0][0] < -1e-12);
    }

    #[test]
    fn two_group_covariance_vanishes_without_motion() {
        assert_eq!(two_group_covariance(1.0, 1.0, 0.4, 8, 0.0), -0.0);
    }

    #[test]
    fn entropy_bounds() {
        for seed in 0..10 {
            let cfg = random_configuration(7, 4, 3.0, seed).unwrap();
            let heads = [HeadSpec::scalar(2.0, 4)];
            let state = compute_flow_state(&cfg, &heads).unwrap();
            let d = token_derivatives(&state, DynamicsKind::Sphere).unwrap();
            let r = entropy_report(&state, &heads, &d).unwrap();
            for row in &r.entropy {
                assert!(row[0] >= 0.0 && row[0] <= 7f64.ln() + 1e-12);
            }
        }
    }

    #[test]
    fn single_head_cross_covariance_is_zero() {
        let cfg = random_configuration(5, 3, 1.0, 4).unwrap();
        let heads = [HeadSpec::coordinate_projection(3, [0, 1, 2])];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let c = cross_head_covariance(&state, &heads, 0, 0).unwrap();
        assert_eq!(c.measured, 0.0);
        assert_eq!(c.predicted, 0.0);
    }

    #[test]
    fn cross_covariance_requires_certification() {
        let cfg = random_configuration(4, 3, 1.0, 4).unwrap();
        let heads = [HeadSpec::scalar(1.0, 3), HeadSpec::scalar(1.0, 3)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        assert!(matches!(cross_head_covariance(&state, &heads, 0, 0), Err(Error::NotCertified(_))));
        assert!(matches!(check_condition_e(&state, &heads, 0, 0), Err(Error::NotCertified(_))));
    }

    #[test]
    fn condition_e_on_clustered_state() {
        let cfg = TokenConfiguration::new(vec![UnitVector::basis(4, 0); 4], 1.0).unwrap();
        let heads = [
            HeadSpec::coordinate_projection(4, [0, 1]),
            HeadSpec::coordinate_projection(4, [2, 3]),
        ];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let c = check_condition_e(&state, &heads, 0, 0).unwrap();
        assert_eq!(c.lhs, 0.0);
        assert_eq!(c.rhs, 0.0);
        assert!(c.ok && c.entropy_nondecreasing);
    }

    #[test]
    fn condition_e_terms_recombine() {
        for seed in 0..10 {
            let cfg = random_configuration(6, 4, 1.3, seed).unwrap();
            let heads = [
                HeadSpec::coordinate_projection(4, [0, 1]),
                HeadSpec::coordinate_projection(4, [2, 3]),
            ];
            let state = compute_flow_state(&cfg, &heads).unwrap();
            for i in 0..6 {
                for h in 0..2 {
                    let c = check_condition_e(&state, &heads, i, h).unwrap();
                    let sum: f64 = c.terms.iter().sum();
                    assert!((sum - c.production_rate).abs() < 1e-9, "seed {seed}: {sum} vs {}", c.production_rate);
                }
            }
        }
    }
}
