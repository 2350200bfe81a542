//! Scalar reductions for equiangular tokens and scalar heads `M_h = lambda_h I`.
//!
//! When all pairwise alignments share one value `gamma`, the n-token flow
//! collapses to `dgamma/dt = sum_h g^h(gamma)`. Three kernels are covered:
//!
//! * per-head normalized softmax (standard attention),
//!   `g^h = 2 lambda e^{lambda beta gamma} (1-gamma)(1+(n-1)gamma) / (e^{lambda beta} + (n-1) e^{lambda beta gamma})`;
//! * unnormalized softmax with the `1/n` velocity, `(2 lambda / n) e^{lambda beta gamma} (1-gamma)(1+(n-1)gamma)`;
//! * ReLU with the `1/n` velocity, `(2 lambda^2 gamma / n)(1-gamma)(1+(n-1)gamma)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default step for the scalar integrator.
pub const DEFAULT_REDUCED_DT: f64 = 1e-3;
/// `epsilon = 1 - gamma` window used for late-time rate fits.
pub const FIT_WINDOW: (f64, f64) = (1e-6, 1e-3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedKernel {
    /// Per-head normalized softmax.
    Softmax,
    /// Softmax with the unnormalized `1/n` velocity.
    SoftmaxUnnormalized,
    Relu,
}

/// Common alignment and the heads acting on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub gamma: f64,
    pub epsilon: f64,
    pub n: usize,
    pub strengths: Vec<f64>,
    pub beta: f64,
}

impl ReducedState {
    pub fn new(gamma: f64, n: usize, strengths: Vec<f64>, beta: f64) -> Result<Self> {
        check_gamma(gamma, n)?;
        Ok(Self { gamma, epsilon: 1.0 - gamma, n, strengths, beta })
    }
}

fn check_gamma(gamma: f64, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    let lower = -1.0 / (n as f64 - 1.0);
    if !(gamma > lower && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} outside ({lower}, 1]")));
    }
    Ok(())
}

/// Per-head normalized softmax rate `g^h(gamma)`.
pub fn softmax_rate(gamma: f64, lambda: f64, beta: f64, n: usize) -> f64 {
    let m = n as f64 - 1.0;
    // Divide through by e^{lambda beta gamma} to keep the ratio finite for large strengths.
    let ratio = 1.0 / ((lambda * beta * (1.0 - gamma)).exp() + m);
    2.0 * lambda * ratio * (1.0 - gamma) * (1.0 + m * gamma)
}

/// Unnormalized softmax rate under the `1/n` velocity.
pub fn unnormalized_softmax_rate(gamma: f64, lambda: f64, beta: f64, n: usize) -> f64 {
    let nf = n as f64;
    2.0 * lambda / nf * (lambda * beta * gamma).exp() * (1.0 - gamma) * (1.0 + (nf - 1.0) * gamma)
}

/// ReLU rate; zero for `gamma <= 0`, where every cross score is clipped.
pub fn relu_rate(gamma: f64, lambda: f64, n: usize) -> f64 {
    if gamma <= 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    2.0 * lambda * lambda * gamma / nf * (1.0 - gamma) * (1.0 + (nf - 1.0) * gamma)
}

/// Scalar ODE `dgamma/dt = sum_h rate(gamma; lambda_h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    pub kernel: ReducedKernel,
    pub strengths: Vec<f64>,
    pub beta: f64,
    pub n: usize,
}

impl ReducedModel {
    pub fn new(kernel: ReducedKernel, strengths: Vec<f64>, beta: f64, n: usize) -> Result<Self> {
        if strengths.is_empty() || strengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("strengths must be positive".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
        }
        Ok(Self { kernel, strengths, beta, n })
    }

    pub fn total_strength(&self) -> f64 {
        self.strengths.iter().sum()
    }

    pub fn rate(&self, gamma: f64) -> f64 {
        self.strengths
            .iter()
            .map(|&l| match self.kernel {
                ReducedKernel::Softmax => softmax_rate(gamma, l, self.beta, self.n),
                ReducedKernel::SoftmaxUnnormalized => unnormalized_softmax_rate(gamma, l, self.beta, self.n),
                ReducedKernel::Relu => relu_rate(gamma, l, self.n),
            })
            .sum()
    }

    /// Predicted late-time decay rate of `epsilon`.
    pub fn late_rate(&self) -> f64 {
        match self.kernel {
            ReducedKernel::Softmax => 2.0 * self.total_strength(),
            ReducedKernel::SoftmaxUnnormalized => {
                2.0 * self.strengths.iter().map(|&l| l * (self.beta * l).exp()).sum::<f64>()
            }
            ReducedKernel::Relu => 2.0 * self.strengths.iter().map(|l| l * l).sum::<f64>(),
        }
    }

    fn rk4(&self, gamma: f64, dt: f64) -> f64 {
        let k1 = self.rate(gamma);
        let k2 = self.rate(gamma + 0.5 * dt * k1);
        let k3 = self.rate(gamma + 0.5 * dt * k2);
        let k4 = self.rate(gamma + dt * k3);
        gamma + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl ReducedTrajectory {
    pub fn epsilons(&self) -> Vec<f64> {
        self.gammas.iter().map(|g| 1.0 - g).collect()
    }

    /// Linear interpolation of `gamma` at `t` inside the recorded range.
    pub fn gamma_at(&self, t: f64) -> Option<f64> {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return (self.times.first() == Some(&t)).then(|| self.gammas[0]);
        }
        if k == self.times.len() {
            return None;
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Some(self.gammas[k - 1] + w * (self.gammas[k] - self.gammas[k - 1]))
    }
}

/// RK4 on the scalar ODE, recording every step.
pub fn integrate_reduced(model: &ReducedModel, gamma0: f64, dt: f64, t_end: f64) -> Result<ReducedTrajectory> {
    check_gamma(gamma0, model.n)?;
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidArgument("dt and t_end must be positive".into()));
    }
    let steps = ((t_end / dt).round() as usize).max(1);
    let mut times = Vec::with_capacity(steps + 1);
    let mut gammas = Vec::with_capacity(steps + 1);
    let mut g = gamma0;
    times.push(0.0);
    gammas.push(g);
    for k in 1..=steps {
        g = model.rk4(g, dt);
        times.push(k as f64 * dt);
        gammas.push(g);
    }
    Ok(ReducedTrajectory { times, gammas })
}

/// First time `gamma(t) >= target`, interpolated between integrator steps.
pub fn clustering_time(model: &ReducedModel, gamma0: f64, target: f64, dt: f64, t_max: f64) -> Result<f64> {
    check_gamma(gamma0, model.n)?;
    if !(target > gamma0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target {target} must lie in (gamma0, 1) = ({gamma0}, 1)"
        )));
    }
    if !(dt > 0.0 && t_max > 0.0) {
        return Err(Error::InvalidArgument("dt and t_max must be positive".into()));
    }
    let steps = (t_max / dt).ceil() as usize;
    let mut g = gamma0;
    for k in 1..=steps {
        let next = model.rk4(g, dt);
        if next >= target {
            let t0 = (k - 1) as f64 * dt;
            return Ok(t0 + dt * (target - g) / (next - g));
        }
        g = next;
    }
    Err(Error::Timeout { target, t_max })
}

/// Least-squares decay rate `-d log(epsilon)/dt` over samples with `epsilon` in `window`.
pub fn fit_decay_rate(times: &[f64], epsilons: &[f64], window: (f64, f64)) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(epsilons)
        .filter(|&(_, &e)| e >= window.0 && e <= window.1)
        .map(|(&t, &e)| (t, e.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

/// `C_h = ((n-1) lambda_h / (2n)) e^{beta lambda_h} epsilon_0`.
pub fn energy_gap_constant(lambda: f64, beta: f64, n: usize, epsilon0: f64) -> f64 {
    let nf = n as f64;
    (nf - 1.0) * lambda / (2.0 * nf) * (beta * lambda).exp() * epsilon0
}

/// `E^h(1) - E^h(gamma) = ((n-1)/(2 beta n)) (e^{beta lambda} - e^{beta lambda gamma})` for an equiangular state.
pub fn energy_gap(lambda: f64, beta: f64, n: usize, gamma: f64) -> f64 {
    let nf = n as f64;
    // e^{bl} - e^{bl g} = e^{bl} (1 - e^{-bl(1-g)}), accurate for gamma near 1.
    (nf - 1.0) / (2.0 * beta * nf) * (beta * lambda).exp() * -(-beta * lambda * (1.0 - gamma)).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rate_special_points() {
        let (l, b, n) = (1.3, 0.8, 8);
        assert!((softmax_rate(0.0, l, b, n) - 2.0 * l / ((l * b).exp() + 7.0)).abs() < 1e-15);
        assert_eq!(softmax_rate(1.0, l, b, n), 0.0);
        let eps = 1e-7;
        assert!((softmax_rate(1.0 - eps, l, b, n) / (2.0 * l * eps) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn relu_rate_special_points() {
        assert_eq!(relu_rate(0.0, 1.0, 8), 0.0);
        assert_eq!(relu_rate(-0.1, 1.0, 8), 0.0);
        assert_eq!(relu_rate(1.0, 1.0, 8), 0.0);
        let g = 1e-8;
        assert!((relu_rate(g, 1.5, 8) / (2.0 * 2.25 / 8.0 * g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rates_positive_inside() {
        for k in 1..100 {
            let g = k as f64 / 100.0;
            assert!(softmax_rate(g, 1.0, 1.0, 8) > 0.0);
            assert!(unnormalized_softmax_rate(g, 1.0, 1.0, 8) > 0.0);
            assert!(relu_rate(g, 1.0, 8) > 0.0);
        }
    }

    #[test]
    fn reduced_trajectory_is_monotone() {
        let model = ReducedModel::new(ReducedKernel::Softmax, vec![1.0], 1.0, 8).unwrap();
        let tr = integrate_reduced(&model, 0.05, 1e-2, 20.0).unwrap();
        assert!(tr.gammas.windows(2).all(|w| w[1] >= w[0]));
        assert!(*tr.gammas.last().unwrap() > 0.999);
    }

    #[test]
    fn softmax_linear_phase_estimate() {
        let (l, b, n) = (1.0, 1.0, 8);
        let model = ReducedModel::new(ReducedKernel::Softmax, vec![l], b, n).unwrap();
        let c0 = softmax_rate(0.0, l, b, n);
        let target = 0.02;
        let t = clustering_time(&model, 0.0, target, 1e-4, 10.0).unwrap();
        let estimate = target / c0;
        assert!((t / estimate - 1.0).abs() < 0.10, "t={t} estimate={estimate}");
    }

    #[test]
    fn relu_silent_at_zero() {
        let model = ReducedModel::new(ReducedKernel::Relu, vec![1.0], 1.0, 8).unwrap();
        assert!(matches!(clustering_time(&model, 0.0, 0.5, 1e-2, 50.0), Err(Error::Timeout { .. })));
    }

    #[test]
    fn late_rate_fit_matches_total_strength() {
        let model = ReducedModel::new(ReducedKernel::Softmax, vec![0.5, 1.5], 1.0, 8).unwrap();
        let tr = integrate_reduced(&model, 0.05, 1e-3, 12.0).unwrap();
        let rate = fit_decay_rate(&tr.times, &tr.epsilons(), FIT_WINDOW).unwrap();
        assert!((rate / 4.0 - 1.0).abs() < 0.05, "{rate}");
    }

    #[test]
    fn energy_gap_constants() {
        let c = energy_gap_constant(1.0, 1.0, 8, 0.2);
        assert!((c - 7.0 / 16.0 * std::f64::consts::E * 0.2).abs() < 1e-15);
        assert!((c - 0.237850).abs() < 1e-6);
        assert_eq!(energy_gap_constant(1.0, 1.0, 8, 0.0), 0.0);
    }

    #[test]
    fn energy_gap_below_linear_constant() {
        // Convexity of exp: the gap never exceeds its linearization in epsilon.
        for k in 0..=50 {
            let eps = k as f64 / 50.0;
            let gap = energy_gap(1.5, 1.0, 8, 1.0 - eps);
            assert!(gap <= energy_gap_constant(1.5, 1.0, 8, eps) * (1.0 + 1e-14));
        }
    }

    #[test]
    fn energy_gap_bound_past_linear_onset() {
        // epsilon_0 is taken where the linear regime starts; the bound then holds with 5% slack.
        let (lambdas, beta, n) = ([0.5, 1.5], 1.0, 8);
        let model = ReducedModel::new(ReducedKernel::Softmax, lambdas.to_vec(), beta, n).unwrap();
        let tr = integrate_reduced(&model, 0.8, 1e-3, 8.0).unwrap();
        let onset = tr.gammas.iter().position(|g| 1.0 - g <= 1e-2).unwrap();
        let (t0, eps0) = (tr.times[onset], 1.0 - tr.gammas[onset]);
        // Below epsilon ~ 1e-9 the stored gamma carries only a few significant bits of epsilon.
        for k in (onset..tr.times.len()).take_while(|&k| 1.0 - tr.gammas[k] >= 1e-9) {
            let t = tr.times[k] - t0;
            for &l in &lambdas {
                let gap = energy_gap(l, beta, n, tr.gammas[k]);
                let bound = energy_gap_constant(l, beta, n, eps0) * (-4.0 * t).exp();
                assert!(gap <= 1.05 * bound, "t={t} gap={gap} bound={bound}");
            }
        }
    }

    #[test]
    fn rejects_bad_gamma() {
        let model = ReducedModel::new(ReducedKernel::Softmax, vec![1.0], 1.0, 8).unwrap();
        assert!(integrate_reduced(&model, 1.5, 1e-2, 1.0).is_err());
        assert!(ReducedState::new(-0.5, 3, vec![1.0], 1.0).is_err());
        let s = ReducedState::new(0.25, 3, vec![1.0], 1.0).unwrap();
        assert_eq!(s.epsilon, 0.75);
    }
}
