//! Browser bindings for three small interactive plots.
//!
//! Each `*_series` function returns interleaved rows as a flat `Vec<f64>` and
//! is usable natively; the `#[wasm_bindgen]` wrappers only convert errors.

use sphereflow::attention::{check_radial_dominance, compute_flow_state, HeadSpec, TokenConfiguration};
use sphereflow::dynamics::{equiangular_configuration, integrate, DynamicsKind, Schedule};
use sphereflow::geometry::UnitVector;
use sphereflow::thresholds::{critical_beta, inflection_strength, optimal_strength, rate_function};
use wasm_bindgen::prelude::*;

const MAX_TOKENS: usize = 64;
const MAX_POINTS: usize = 4096;
const DT: f64 = 1e-2;

/// Columns per row of [`clustering_series`].
pub const CLUSTERING_COLUMNS: usize = 4;

fn check_points(points: usize) -> Result<(), String> {
    if !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("points must be in 2..={MAX_POINTS}"));
    }
    Ok(())
}

/// Rows `(t, mean alignment, mean entropy, total energy)` for `heads` equal scalar heads
/// started from an equiangular state.
pub fn clustering_series(n: usize, heads: usize, lambda: f64, beta: f64, gamma0: f64, t_end: f64, kind: &str) -> Result<Vec<f64>, String> {
    if !(2..=MAX_TOKENS).contains(&n) {
        return Err(format!("n must be in 2..={MAX_TOKENS}"));
    }
    if heads == 0 || heads > 8 {
        return Err("heads must be in 1..=8".into());
    }
    if !(t_end > 0.0 && t_end <= 200.0) {
        return Err("t_end must be in (0, 200]".into());
    }
    let kind: DynamicsKind = kind.parse().map_err(|e| format!("{e}"))?;
    let cfg = equiangular_configuration(n, n, gamma0, beta).map_err(|e| e.to_string())?;
    let hs = vec![HeadSpec::scalar(lambda, n); heads];
    let every = ((t_end / DT) as usize / 400).max(1);
    let rec = integrate(&cfg, &hs, kind, &Schedule::new(DT, t_end, every)).map_err(|e| e.to_string())?;
    let entropy = rec.mean_entropy();
    let energy = rec.total_energy();
    let mut out = Vec::with_capacity(rec.len() * CLUSTERING_COLUMNS);
    for k in 0..rec.len() {
        out.extend([rec.times[k], rec.mean_alignment[k], entropy[k], energy[k]]);
    }
    Ok(out)
}

/// Rows `(lambda, phi, phi'')` on `(0, lambda_max]`.
pub fn rate_series(beta: f64, n: usize, lambda_max: f64, points: usize) -> Result<Vec<f64>, String> {
    check_points(points)?;
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err("lambda_max must be positive".into());
    }
    // Validates beta and n.
    optimal_strength(beta, n).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(points * 3);
    for k in 1..=points {
        let l = lambda_max * k as f64 / points as f64;
        let r = rate_function(l, beta, n);
        out.extend([l, r.phi, r.d2]);
    }
    Ok(out)
}

/// `(lambda*, lambda_c)`.
pub fn strength_markers(beta: f64, n: usize) -> Result<Vec<f64>, String> {
    let a = optimal_strength(beta, n).map_err(|e| e.to_string())?;
    let b = inflection_strength(beta, n).map_err(|e| e.to_string())?;
    Ok(vec![a, b])
}

/// Rows `(beta, min radial-dominance margin)` for `heads` copies of `alpha I` on
/// `n` orthonormal tokens.
pub fn margin_series(heads: usize, n: usize, alpha: f64, beta_lo: f64, beta_hi: f64, points: usize) -> Result<Vec<f64>, String> {
    check_points(points)?;
    if !(2..=MAX_TOKENS).contains(&n) || heads == 0 || heads > 16 {
        return Err(format!("need 2 <= n <= {MAX_TOKENS} and 1 <= heads <= 16"));
    }
    if !(beta_lo > 0.0 && beta_hi > beta_lo) {
        return Err("need 0 < beta_lo < beta_hi".into());
    }
    let hs = vec![HeadSpec::scalar(alpha, n); heads];
    let tokens: Vec<UnitVector> = (0..n).map(|i| UnitVector::basis(n, i)).collect();
    let mut out = Vec::with_capacity(points * 2);
    for k in 0..points {
        let beta = beta_lo + (beta_hi - beta_lo) * k as f64 / (points - 1) as f64;
        let cfg = TokenConfiguration::new(tokens.clone(), beta).map_err(|e| e.to_string())?;
        let st = compute_flow_state(&cfg, &hs).map_err(|e| e.to_string())?;
        let m = check_radial_dominance(&st, &cfg).map_err(|e| e.to_string())?.min_margin();
        out.extend([beta, m]);
    }
    Ok(out)
}

/// `beta*`, or `NaN` where it does not exist.
pub fn critical_beta_or_nan(alpha: f64, heads: usize, n: usize) -> f64 {
    critical_beta(alpha, heads, n).unwrap_or(f64::NAN)
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = clusteringSeries)]
pub fn clustering_series_js(n: usize, heads: usize, lambda: f64, beta: f64, gamma0: f64, t_end: f64, kind: &str) -> Result<Vec<f64>, JsError> {
    js(clustering_series(n, heads, lambda, beta, gamma0, t_end, kind))
}

#[wasm_bindgen(js_name = rateSeries)]
pub fn rate_series_js(beta: f64, n: usize, lambda_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    js(rate_series(beta, n, lambda_max, points))
}

#[wasm_bindgen(js_name = strengthMarkers)]
pub fn strength_markers_js(beta: f64, n: usize) -> Result<Vec<f64>, JsError> {
    js(strength_markers(beta, n))
}

#[wasm_bindgen(js_name = marginSeries)]
pub fn margin_series_js(heads: usize, n: usize, alpha: f64, beta_lo: f64, beta_hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    js(margin_series(heads, n, alpha, beta_lo, beta_hi, points))
}

#[wasm_bindgen(js_name = criticalBeta)]
pub fn critical_beta_js(alpha: f64, heads: usize, n: usize) -> f64 {
    critical_beta_or_nan(alpha, heads, n)
}
