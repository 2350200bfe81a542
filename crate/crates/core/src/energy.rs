//! Interaction energies and their analytic rates.
//!
//! `E^h = (1/(2 beta n^2)) sum_{i,j} exp(beta <x_i, M_h x_j>) = sum_i Z_i^h / (2 beta n^2)`.
//! With symmetric scores the gradient in `x_i` is `(1/n^2) M_h g_i^h`, which all
//! rate formulas below use. When every row is representable the linear-scale
//! energies are exact; otherwise they are `+inf` and the log-scale fields stay finite.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attention::{log_sum_exp, radial_shadows, ConditionFlags, FlowState, HeadSpec, RadialShadows, TokenConfiguration};
use crate::dynamics::{token_derivatives, DynamicsKind, HALT_KINETIC};
use crate::error::{Error, Result};
use crate::linalg::{operator_norm, smallest_nonzero_singular_value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub per_head: Vec<f64>,
    pub total: f64,
    pub log_per_head: Vec<f64>,
    pub log_total: f64,
    pub overflow: bool,
    /// `dE_multi/dt`; absent for ReLU dynamics, which have no Lyapunov identity.
    pub rate_total_analytic: Option<f64>,
    /// Generic per-head rates `(1/n^2) sum_i <dx_i/dt, M_h g_i^h>`.
    pub rate_per_head_analytic: Option<Vec<f64>>,
    /// `(1/n) sum_i |dx_i/dt|^2`.
    pub kinetic: f64,
    /// `G = (1/(beta n)) sum_i log Z_i`.
    pub log_partition: f64,
    pub radial_shadow_terms: RadialShadows,
}

fn prefactor_log(n: usize, beta: f64) -> f64 {
    (2.0 * beta * (n * n) as f64).ln()
}

/// `log E^h` for one head, evaluated as a log-sum-exp over all `n^2` scores.
pub fn per_head_log_energy(cfg: &TokenConfiguration, head: &HeadSpec) -> Result<f64> {
    if head.dim() != cfg.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dim(), got: head.dim() });
    }
    let xs = cfg.vectors();
    let mx: Vec<DVector<f64>> = xs.iter().map(|x| head.apply_score(x)).collect();
    let beta = cfg.beta();
    let exps: Vec<f64> = xs.iter().flat_map(|x| mx.iter().map(move |m| beta * x.dot(m))).collect();
    Ok(log_sum_exp(&exps) - prefactor_log(cfg.n(), beta))
}

/// `E^h`; `+inf` when the sum overflows (see [`per_head_log_energy`]).
pub fn per_head_energy(cfg: &TokenConfiguration, head: &HeadSpec) -> Result<f64> {
    Ok(per_head_log_energy(cfg, head)?.exp())
}

/// `(E^h, log E^h)` for every head, read off the partition sums.
pub fn energies(state: &FlowState) -> (Vec<f64>, Vec<f64>) {
    let n = state.n();
    let lp = prefactor_log(n, state.beta);
    let logs: Vec<f64> = (0..state.heads())
        .map(|h| {
            let col: Vec<f64> = state.log_partition_sums.iter().map(|row| row[h]).collect();
            log_sum_exp(&col) - lp
        })
        .collect();
    let lin = (0..state.heads())
        .map(|h| {
            let s: f64 = state.partition_sums.iter().map(|row| row[h]).sum();
            s / (2.0 * state.beta * (n * n) as f64)
        })
        .collect();
    (lin, logs)
}

pub fn total_energy(state: &FlowState) -> f64 {
    energies(state).0.iter().sum()
}

/// `G = (1/(beta n)) sum_i log Z_i`.
pub fn log_partition_energy(state: &FlowState) -> f64 {
    state.log_token_partition.iter().sum::<f64>() / (state.beta * state.n() as f64)
}

fn kinetic(derivs: &[DVector<f64>]) -> f64 {
    derivs.iter().map(|d| d.norm_squared()).sum::<f64>() / derivs.len() as f64
}

fn gradient_velocity(state: &FlowState, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(state.tokens[i].len());
    for g in &state.gradient_aggregations[i] {
        v += g;
    }
    v / state.n() as f64
}

/// `(1/n) sum_i <dx_i/dt, (1/n) sum_h M_h g_i^h>`, valid for any token derivatives.
pub fn total_energy_rate_generic(state: &FlowState, derivs: &[DVector<f64>]) -> f64 {
    let n = state.n() as f64;
    (0..state.n()).map(|i| derivs[i].dot(&gradient_velocity(state, i))).sum::<f64>() / n
}

fn total_rate_with(state: &FlowState, kind: DynamicsKind, derivs: &[DVector<f64>]) -> Result<f64> {
    if !state.values_tied {
        return Ok(total_energy_rate_generic(state, derivs));
    }
    match kind {
        DynamicsKind::Flat | DynamicsKind::Sphere => Ok(kinetic(derivs)),
        DynamicsKind::Normalized => Ok(derivs
            .iter()
            .zip(&state.token_partition)
            .map(|(d, z)| z * d.norm_squared())
            .sum::<f64>()
            / state.n() as f64),
        DynamicsKind::HeadNormalized => Ok(total_energy_rate_generic(state, derivs)),
        DynamicsKind::ReluSphere => Err(Error::InvalidArgument(
            "relu dynamics have no energy-rate identity".into(),
        )),
    }
}

/// Analytic `dE_multi/dt` for the given dynamics.
///
/// Flat and sphere: `(1/n) sum_i |dx_i/dt|^2`. Normalized: `(1/n) sum_i Z_i |dx_i/dt|^2`.
/// Head-normalized dynamics and untied values use the generic inner-product form.
pub fn total_energy_rate(state: &FlowState, kind: DynamicsKind) -> Result<f64> {
    let derivs = token_derivatives(state, kind)?;
    total_rate_with(state, kind, &derivs)
}

fn generic_head_rate(state: &FlowState, head: usize, derivs: &[DVector<f64>]) -> f64 {
    let n = state.n() as f64;
    (0..state.n())
        .map(|i| derivs[i].dot(&state.gradient_aggregations[i][head]))
        .sum::<f64>()
        / (n * n)
}

/// Per-head energy rate, with the closed-form split when it is certified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerHeadRate {
    /// `(1/n^2) sum_i <dx_i/dt, M_h g_i^h>`.
    pub rate: f64,
    pub certified: bool,
    /// `(1/n^3) sum_i (b_i^h)^2` on the sphere, `(1/n^3) sum_i |f_i^h|^2` in flat space.
    pub tangential_power: Option<f64>,
    /// `(1/n^3) sum_i a_i^h A_h^(i)` on the sphere, zero in flat space.
    pub shadow_interference: Option<f64>,
}

impl PerHeadRate {
    pub fn closed_form(&self) -> Option<f64> {
        Some(self.tangential_power? - self.shadow_interference?)
    }
}

pub fn per_head_rate(
    state: &FlowState,
    flags: &ConditionFlags,
    head: usize,
    kind: DynamicsKind,
) -> Result<PerHeadRate> {
    if head >= state.heads() {
        return Err(Error::InvalidArgument(format!("head index {head} out of range")));
    }
    let derivs = token_derivatives(state, kind)?;
    let rate = generic_head_rate(state, head, &derivs);
    let certified = flags.per_head_certified()
        && matches!(kind, DynamicsKind::Flat | DynamicsKind::Sphere)
        && flags.score_symmetric.len() == state.heads();
    if !certified {
        return Ok(PerHeadRate { rate, certified, tangential_power: None, shadow_interference: None });
    }
    let n3 = (state.n() as f64).powi(3);
    let (power, interference) = if kind == DynamicsKind::Flat {
        let p: f64 = state.aggregations.iter().map(|row| row[head].norm_squared()).sum();
        (p, 0.0)
    } else {
        let rt = state.radial_tangential();
        let shadows = radial_shadows(state);
        let p: f64 = rt.iter().map(|row| row[head].tangential_norm.powi(2)).sum();
        let s: f64 = (0..state.n()).map(|i| shadows.radial[i][head] * shadows.cross[i][head]).sum();
        (p, s)
    };
    Ok(PerHeadRate {
        rate,
        certified,
        tangential_power: Some(power / n3),
        shadow_interference: Some(interference / n3),
    })
}

/// Threshold data of the approximate-orthogonality bound for one head (flat dynamics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxOrthThreshold {
    /// `sum_i f^T M_h f / (sum_i |f_i^h| sum_{h' != h} |f_i^{h'}|)`; `+inf` with no cross-head mass.
    pub delta_star: f64,
    /// `max_{h' != h} |M_{h'} M_h|_op`.
    pub delta: f64,
    pub sigma_min: Option<f64>,
    /// `delta / sigma_min`.
    pub delta_prime: f64,
    pub guaranteed: bool,
    /// `(1/n^3) (sum_i f^T M_h f - delta' sum_i |f_i^h| sum_{h' != h} |f_i^{h'}|)`.
    pub rate_lower_bound: f64,
}

pub fn approx_orth_threshold(state: &FlowState, heads: &[HeadSpec], head: usize) -> Result<ApproxOrthThreshold> {
    if heads.len() != state.heads() {
        return Err(Error::InvalidArgument(format!(
            "state has {} heads, got {}",
            state.heads(),
            heads.len()
        )));
    }
    if head >= heads.len() {
        return Err(Error::InvalidArgument(format!("head index {head} out of range")));
    }
    let m = heads[head].score_matrix();
    let mut self_term = 0.0;
    let mut cross_term = 0.0;
    for row in &state.aggregations {
        let f = &row[head];
        self_term += f.dot(&(m * f));
        let others: f64 = row.iter().enumerate().filter(|&(k, _)| k != head).map(|(_, g)| g.norm()).sum();
        cross_term += f.norm() * others;
    }
    let delta_star = if cross_term > 0.0 { self_term / cross_term } else { f64::INFINITY };
    let delta = heads
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != head)
        .map(|(_, other)| operator_norm(&(other.score_matrix() * m)))
        .fold(0.0, f64::max);
    let sigma_min = smallest_nonzero_singular_value(m);
    let delta_prime = match sigma_min {
        _ if delta == 0.0 => 0.0,
        Some(s) => delta / s,
        None => f64::INFINITY,
    };
    let n3 = (state.n() as f64).powi(3);
    let rate_lower_bound = if cross_term > 0.0 {
        (self_term - delta_prime * cross_term) / n3
    } else {
        self_term / n3
    };
    Ok(ApproxOrthThreshold {
        delta_star,
        delta,
        sigma_min,
        delta_prime,
        guaranteed: delta_prime <= delta_star,
        rate_lower_bound,
    })
}

/// Threshold data of the approximate value-alignment bound (sphere dynamics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxValueThreshold {
    /// `sum_i |dx_i|^2 / ((1/n) sum_i |dx_i| sum_h |g_i^h|)`; zero when halted.
    pub epsilon_star: f64,
    pub halted: bool,
    /// Largest `|W_h - M_h|_op` over the heads.
    pub epsilon: f64,
    pub guaranteed: bool,
    /// `(1/n) sum_i |dx_i|^2 - (epsilon/n^2) sum_i |dx_i| sum_h |g_i^h|`.
    pub rate_lower_bound: f64,
}

pub fn approx_value_threshold(state: &FlowState, heads: &[HeadSpec]) -> Result<ApproxValueThreshold> {
    let derivs = token_derivatives(state, DynamicsKind::Sphere)?;
    let n = state.n() as f64;
    let squares: f64 = derivs.iter().map(|d| d.norm_squared()).sum();
    let leverage: f64 = derivs
        .iter()
        .zip(&state.unweighted_aggregations)
        .map(|(d, row)| d.norm() * row.iter().map(|g| g.norm()).sum::<f64>())
        .sum();
    let epsilon = heads.iter().map(HeadSpec::value_perturbation_norm).fold(0.0, f64::max);
    let halted = squares / n < HALT_KINETIC;
    let epsilon_star = if halted || leverage == 0.0 { 0.0 } else { squares / (leverage / n) };
    Ok(ApproxValueThreshold {
        epsilon_star,
        halted,
        epsilon,
        guaranteed: !halted && epsilon <= epsilon_star,
        rate_lower_bound: squares / n - epsilon * leverage / (n * n),
    })
}

/// Full report for a state and the token derivatives of the dynamics that produced it.
pub fn energy_report(state: &FlowState, kind: DynamicsKind, derivs: &[DVector<f64>]) -> Result<EnergyReport> {
    if derivs.len() != state.n() {
        return Err(Error::DimensionMismatch { expected: state.n(), got: derivs.len() });
    }
    let (per_head, log_per_head) = energies(state);
    let total = per_head.iter().sum();
    let (rate_total_analytic, rate_per_head_analytic) = if kind.is_softmax() {
        (
            Some(total_rate_with(state, kind, derivs)?),
            Some((0..state.heads()).map(|h| generic_head_rate(state, h, derivs)).collect()),
        )
    } else {
        (None, None)
    };
    Ok(EnergyReport {
        total,
        log_total: log_sum_exp(&log_per_head),
        overflow: state.any_overflow(),
        per_head,
        log_per_head,
        rate_total_analytic,
        rate_per_head_analytic,
        kinetic: kinetic(derivs),
        log_partition: log_partition_energy(state),
        radial_shadow_terms: radial_shadows(state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{check_conditions, compute_flow_state, CONDITION_TOL};
    use crate::dynamics::random_configuration;
    use crate::geometry::UnitVector;
    use std::f64::consts::E;

    fn clustered(n: usize, d: usize, beta: f64) -> TokenConfiguration {
        TokenConfiguration::new(vec![UnitVector::basis(d, 0); n], beta).unwrap()
    }

    #[test]
    fn clustered_energy() {
        for n in [1, 3, 8] {
            let (lambda, beta) = (1.3, 0.7);
            let e = per_head_energy(&clustered(n, 3, beta), &HeadSpec::scalar(lambda, 3)).unwrap();
            assert!((e - (beta * lambda).exp() / (2.0 * beta)).abs() < 1e-12);
        }
        let e = per_head_energy(&clustered(5, 2, 1.0), &HeadSpec::scalar(1.0, 2)).unwrap();
        assert!((e - 1.35914).abs() < 1e-5);
    }

    #[test]
    fn orthogonal_energy_by_direct_summation() {
        let cfg = TokenConfiguration::new((0..8).map(|i| UnitVector::basis(8, i)).collect(), 1.0).unwrap();
        let e = per_head_energy(&cfg, &HeadSpec::scalar(1.0, 8)).unwrap();
        let mut oracle = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                oracle += if i == j { E } else { 1.0 };
            }
        }
        assert!((e - oracle / 128.0).abs() < 1e-14);
        let state = compute_flow_state(&cfg, &[HeadSpec::scalar(1.0, 8)]).unwrap();
        assert!((total_energy(&state) - e).abs() < 1e-14);
    }

    #[test]
    fn clustered_rate_is_zero() {
        let cfg = clustered(4, 3, 1.0);
        let state = compute_flow_state(&cfg, &[HeadSpec::scalar(1.0, 3)]).unwrap();
        assert!(total_energy_rate(&state, DynamicsKind::Sphere).unwrap().abs() < 1e-28);
    }

    #[test]
    fn flat_rate_dominates_sphere_rate() {
        for seed in 0..20 {
            let cfg = random_configuration(6, 5, 1.0, seed).unwrap();
            let m = nalgebra::DMatrix::from_fn(5, 5, |i, j| 0.3 / (1.0 + (i + j) as f64));
            let heads = [HeadSpec::from_matrix(m).unwrap(), HeadSpec::scalar(0.8, 5)];
            let state = compute_flow_state(&cfg, &heads).unwrap();
            let flat = total_energy_rate(&state, DynamicsKind::Flat).unwrap();
            let sphere = total_energy_rate(&state, DynamicsKind::Sphere).unwrap();
            assert!(sphere <= flat + 1e-12);
        }
    }

    #[test]
    fn relu_has_no_rate_identity() {
        let cfg = clustered(2, 2, 1.0);
        let state = compute_flow_state(&cfg, &[HeadSpec::scalar(1.0, 2)]).unwrap();
        assert!(matches!(
            total_energy_rate(&state, DynamicsKind::ReluSphere),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_head_sphere_split_has_no_interference() {
        let cfg = random_configuration(5, 4, 1.0, 3).unwrap();
        let heads = [HeadSpec::coordinate_projection(4, [0, 1, 2, 3])];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let flags = check_conditions(&heads, CONDITION_TOL);
        let r = per_head_rate(&state, &flags, 0, DynamicsKind::Sphere).unwrap();
        assert!(r.certified);
        assert_eq!(r.shadow_interference, Some(0.0));
        assert!((r.closed_form().unwrap() - r.rate).abs() < 1e-12);
        assert!(r.rate >= 0.0);
    }

    #[test]
    fn flat_block_projection_rate_is_own_power() {
        let cfg = random_configuration(6, 4, 1.0, 9).unwrap();
        let heads = [
            HeadSpec::coordinate_projection(4, [0, 1]),
            HeadSpec::coordinate_projection(4, [2, 3]),
        ];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let flags = check_conditions(&heads, CONDITION_TOL);
        for h in 0..2 {
            let r = per_head_rate(&state, &flags, h, DynamicsKind::Flat).unwrap();
            let n3 = 216.0;
            let own: f64 = state.aggregations.iter().map(|row| row[h].norm_squared()).sum::<f64>() / n3;
            assert!((r.rate - own).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertified_rate_has_no_split() {
        let cfg = random_configuration(4, 3, 1.0, 1).unwrap();
        let heads = [HeadSpec::scalar(1.0, 3), HeadSpec::scalar(2.0, 3)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let r = per_head_rate(&state, &check_conditions(&heads, CONDITION_TOL), 0, DynamicsKind::Sphere).unwrap();
        assert!(!r.certified && r.closed_form().is_none());
    }

    #[test]
    fn single_head_orth_threshold_is_infinite() {
        let cfg = random_configuration(4, 3, 1.0, 2).unwrap();
        let heads = [HeadSpec::scalar(1.0, 3)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let t = approx_orth_threshold(&state, &heads, 0).unwrap();
        assert!(t.delta_star.is_infinite() && t.guaranteed);
    }

    #[test]
    fn exact_orthogonality_is_always_guaranteed() {
        let cfg = random_configuration(4, 4, 1.0, 5).unwrap();
        let heads = [
            HeadSpec::coordinate_projection(4, [0, 1]),
            HeadSpec::coordinate_projection(4, [2, 3]),
        ];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let t = approx_orth_threshold(&state, &heads, 1).unwrap();
        assert_eq!(t.delta, 0.0);
        assert!(t.delta_star > 0.0 && t.guaranteed);
    }

    #[test]
    fn clustered_value_threshold_halts() {
        let cfg = clustered(3, 3, 1.0);
        let heads = [HeadSpec::scalar(1.0, 3)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let t = approx_value_threshold(&state, &heads).unwrap();
        assert!(t.halted && t.epsilon_star == 0.0 && !t.guaranteed);
    }

    #[test]
    fn unperturbed_value_bound_is_total_rate() {
        let cfg = random_configuration(5, 4, 1.0, 11).unwrap();
        let heads = [HeadSpec::scalar(1.0, 4)];
        let state = compute_flow_state(&cfg, &heads).unwrap();
        let t = approx_value_threshold(&state, &heads).unwrap();
        let rate = total_energy_rate(&state, DynamicsKind::Sphere).unwrap();
        assert!((t.rate_lower_bound - rate).abs() < 1e-14);
    }

    #[test]
    fn log_partition_cases() {
        let one = TokenConfiguration::new(vec![UnitVector::basis(2, 0)], 1.0).unwrap();
        let state = compute_flow_state(&one, &[HeadSpec::scalar(1.0, 2)]).unwrap();
        assert!((log_partition_energy(&state) - 1.0).abs() < 1e-15);

        let (n, lambda, beta) = (6, 0.9, 1.7);
        let state = compute_flow_state(&clustered(n, 3, beta), &[HeadSpec::scalar(lambda, 3)]).unwrap();
        let expected = lambda + (n as f64).ln() / beta;
        assert!((log_partition_energy(&state) - expected).abs() < 1e-14);
    }

    #[test]
    fn overflowing_energy_stays_finite_in_log_space() {
        let cfg = clustered(3, 2, 1000.0);
        let head = HeadSpec::scalar(1.0, 2);
        assert!(per_head_energy(&cfg, &head).unwrap().is_infinite());
        let log_e = per_head_log_energy(&cfg, &head).unwrap();
        assert!((log_e - (1000.0 - (2000.0f64).ln())).abs() < 1e-9);
    }
}
