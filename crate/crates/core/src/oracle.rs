//! Finite-difference rates along the flow map.
//!
//! The flow is advanced by the RK4 integrator in sub-steps of [`FD_SUBSTEP`]
//! for `+-FD_STEP`, and the observable is central-differenced. The sub-stepping
//! keeps the integration error far below the difference error, so any mismatch
//! with an analytic rate comes from the identity under test.

use nalgebra::DVector;

use crate::attention::{flow_state_raw, HeadSpec, TokenConfiguration};
use crate::dynamics::{flow_map, DynamicsKind};
use crate::energy::{energies, log_partition_energy};
use crate::entropy::row_entropy;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_SUBSTEP: f64 = 1e-7;

/// Central difference of `observable` along the flow of `kind` at `cfg`.
pub fn flow_derivative<F>(cfg: &TokenConfiguration, heads: &[HeadSpec], kind: DynamicsKind, observable: F) -> Result<f64>
where
    F: Fn(&[DVector<f64>]) -> Result<f64>,
{
    let xs = cfg.vectors();
    let substeps = (FD_STEP / FD_SUBSTEP).round() as usize;
    let fwd = flow_map(&xs, cfg.beta(), heads, kind, FD_STEP, substeps)?;
    let bwd = flow_map(&xs, cfg.beta(), heads, kind, -FD_STEP, substeps)?;
    Ok((observable(&fwd)? - observable(&bwd)?) / (2.0 * FD_STEP))
}

pub fn fd_total_energy_rate(cfg: &TokenConfiguration, heads: &[HeadSpec], kind: DynamicsKind) -> Result<f64> {
    flow_derivative(cfg, heads, kind, |xs| {
        Ok(energies(&flow_state_raw(xs, cfg.beta(), heads)?).0.iter().sum())
    })
}

pub fn fd_head_energy_rate(cfg: &TokenConfiguration, heads: &[HeadSpec], kind: DynamicsKind, head: usize) -> Result<f64> {
    flow_derivative(cfg, heads, kind, |xs| Ok(energies(&flow_state_raw(xs, cfg.beta(), heads)?).0[head]))
}

pub fn fd_entropy_rate(
    cfg: &TokenConfiguration,
    heads: &[HeadSpec],
    kind: DynamicsKind,
    token: usize,
    head: usize,
) -> Result<f64> {
    flow_derivative(cfg, heads, kind, |xs| {
        let state = flow_state_raw(xs, cfg.beta(), heads)?;
        Ok(row_entropy(&state.attention_rows[token][head]))
    })
}

pub fn fd_log_partition_rate(cfg: &TokenConfiguration, heads: &[HeadSpec], kind: DynamicsKind) -> Result<f64> {
    flow_derivative(cfg, heads, kind, |xs| Ok(log_partition_energy(&flow_state_raw(xs, cfg.beta(), heads)?)))
}
