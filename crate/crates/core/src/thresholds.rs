//! Closed-form constants of the scalar-head regime.

use serde::{Deserialize, Serialize};
use std::f64::consts::E;

use crate::error::{Error, Result};

const HALLEY_MAX: usize = 100;
const INV_E: f64 = 1.0 / E;
/// Bracket width `40 / beta` above `lambda*` for the inflection search.
pub const INFLECTION_BRACKET: f64 = 40.0;

/// Principal branch `W_0(z)`, `z >= -1/e`.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() || z < -INV_E {
        return Err(Error::InvalidArgument(format!("lambert_w0 needs z >= -1/e, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let p2 = 2.0 * (E * z + 1.0);
    if p2 <= 0.0 {
        return Ok(-1.0);
    }
    let mut w = if z < -0.25 {
        // Branch-point series in p = sqrt(2 (e z + 1)).
        let p = p2.sqrt();
        let w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p;
        if p < 1e-8 {
            return Ok(w);
        }
        w
    } else {
        z.ln_1p()
    };
    for _ in 0..HALLEY_MAX {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let next = w - f / denom;
        if !next.is_finite() {
            break;
        }
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * (1.0 + next.abs());
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

/// `c*(H)`, the positive root of `rho^2 + (H-1) rho - 1 = 0`.
pub fn critical_alignment(heads: usize) -> Result<f64> {
    if heads == 0 {
        return Err(Error::InvalidArgument("head count must be at least 1".into()));
    }
    let k = heads as f64 - 1.0;
    // Rationalized form of (sqrt(k^2 + 4) - k) / 2, free of cancellation for large H.
    Ok(2.0 / ((k * k + 4.0).sqrt() + k))
}

/// `beta* = (1/(2 alpha)) ln(c*^2 (n-1) / (1 - c*^2))`.
pub fn critical_beta(alpha: f64, heads: usize, n: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if heads < 2 {
        return Err(Error::InvalidArgument("critical beta needs H >= 2".into()));
    }
    let c = critical_alignment(heads)?;
    let c2 = c * c;
    if (n as f64) <= 1.0 / c2 {
        return Err(Error::Infeasible(format!(
            "n = {n} must exceed 1/c*(H)^2 = {:.6} for H = {heads}",
            1.0 / c2
        )));
    }
    Ok((c2 * (n as f64 - 1.0) / (1.0 - c2)).ln() / (2.0 * alpha))
}

/// `phi(lambda) = 2 lambda / (e^{lambda beta} + n - 1)` and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFunction {
    pub phi: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn rate_function(lambda: f64, beta: f64, n: usize) -> RateFunction {
    let lb = lambda * beta;
    let e = lb.exp();
    let m = n as f64 - 1.0;
    let s = e + m;
    RateFunction {
        phi: 2.0 * lambda / s,
        d1: 2.0 * ((1.0 - lb) * e + m) / (s * s),
        d2: 2.0 * beta * e * ((lb - 2.0) * e - (lb + 2.0) * m) / (s * s * s),
    }
}

/// `lambda* = (1 + W((n-1)/e)) / beta`, the maximizer of `phi`.
pub fn optimal_strength(beta: f64, n: usize) -> Result<f64> {
    check_beta_n(beta, n)?;
    Ok((1.0 + lambert_w0((n as f64 - 1.0) / E)?) / beta)
}

fn check_beta_n(beta: f64, n: usize) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    Ok(())
}

fn inflection_residual(lambda: f64, beta: f64, n: usize) -> f64 {
    let lb = lambda * beta;
    (lb - 2.0) * lb.exp() - (lb + 2.0) * (n as f64 - 1.0)
}

/// `lambda_c`, the root of `(lambda beta - 2) e^{lambda beta} = (lambda beta + 2)(n - 1)` above `lambda*`.
pub fn inflection_strength(beta: f64, n: usize) -> Result<f64> {
    let lo0 = optimal_strength(beta, n)?;
    let (mut lo, mut hi) = (lo0, lo0 + INFLECTION_BRACKET / beta);
    if inflection_residual(hi, beta, n) <= 0.0 {
        return Err(Error::Infeasible(format!("no sign change in the inflection bracket for n = {n}")));
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if inflection_residual(mid, beta, n) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if inflection_residual(lo, beta, n).abs() < inflection_residual(hi, beta, n).abs() { lo } else { hi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperadditivityMargin {
    /// `sum_h phi(lambda_h) - H phi(lambda_bar)`.
    pub margin: f64,
    pub mean_strength: f64,
    /// `max_h |lambda_h - lambda_bar|`.
    pub max_deviation: f64,
    /// `3 phi''(lambda_bar) min lambda / (beta^2 max phi)`; not positive when `lambda_bar <= lambda_c`.
    pub deviation_bound: f64,
    pub quantitative_condition_ok: bool,
}

pub fn superadditivity_margin(lambdas: &[f64], beta: f64, n: usize) -> Result<SuperadditivityMargin> {
    check_beta_n(beta, n)?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("strengths must be a nonempty list of positive reals".into()));
    }
    let h = lambdas.len() as f64;
    let mean = lambdas.iter().sum::<f64>() / h;
    let phis: Vec<f64> = lambdas.iter().map(|&l| rate_function(l, beta, n).phi).collect();
    let margin = phis.iter().sum::<f64>() - h * rate_function(mean, beta, n).phi;
    let max_deviation = lambdas.iter().map(|l| (l - mean).abs()).fold(0.0, f64::max);
    let curvature = rate_function(mean, beta, n).d2;
    let min_l = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_phi = phis.iter().cloned().fold(0.0, f64::max);
    let deviation_bound = 3.0 * curvature * min_l / (beta * beta * max_phi);
    Ok(SuperadditivityMargin {
        margin,
        mean_strength: mean,
        max_deviation,
        deviation_bound,
        quantitative_condition_ok: curvature > 0.0 && max_deviation < deviation_bound,
    })
}

/// Every constant for one `(H, n, beta, alpha)` context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub head_count: usize,
    pub n: usize,
    pub beta: f64,
    pub alpha: f64,
    pub critical_alignment: f64,
    /// `None` when `H < 2` or `n <= 1/c*^2`.
    pub critical_beta: Option<f64>,
    pub optimal_strength: f64,
    pub inflection_strength: f64,
}

pub fn threshold_set(heads: usize, n: usize, beta: f64, alpha: f64) -> Result<ThresholdSet> {
    let critical_beta = match critical_beta(alpha, heads, n) {
        Ok(b) => Some(b),
        Err(Error::Infeasible(_)) => None,
        Err(_) if heads < 2 => None,
        Err(e) => return Err(e),
    };
    Ok(ThresholdSet {
        head_count: heads,
        n,
        beta,
        alpha,
        critical_alignment: critical_alignment(heads)?,
        critical_beta,
        optimal_strength: optimal_strength(beta, n)?,
        inflection_strength: inflection_strength(beta, n)?,
    })
}
