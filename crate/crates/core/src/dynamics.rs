//! Vector fields, the RK4 integrator and trajectory recording.
//!
//! All sphere variants project with `P_x(v) = v - <v, x> x` evaluated at the raw
//! stage point. That extended field leaves the unit sphere invariant, so the
//! token-wise renormalization after each step only removes rounding drift.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{flow_state_raw, radial_dominance_of, FlowState, HeadSpec, TokenConfiguration};
use crate::energy::{energy_report, EnergyReport};
use crate::entropy::entropy_report;
use crate::error::{Error, Result};
use crate::geometry::{project_raw, UnitVector, DEGENERATE_NORM};

/// Default integrator step.
pub const DEFAULT_DT: f64 = 1e-3;
/// Default number of steps between recorded samples.
pub const DEFAULT_SAMPLE_EVERY: usize = 10;
/// Kinetic energy below this counts as halted.
pub const HALT_KINETIC: f64 = 1e-16;
const HALT_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    /// `dx_i/dt = v_i`.
    Flat,
    /// `dx_i/dt = P_{x_i}(v_i)`.
    Sphere,
    /// `dx_i/dt = P_{x_i}(v_i / Z_i)` with `Z_i = sum_h Z_i^h`.
    Normalized,
    /// `dx_i/dt = sum_h P_{x_i}(f_i^h / Z_i^h)`, standard per-head softmax attention.
    HeadNormalized,
    /// Kernel `max(0, s)` in place of `exp(beta s)`, `dx_i/dt = P_{x_i}((1/n) sum_h f_i^h)`.
    ReluSphere,
}

impl DynamicsKind {
    pub const ALL: [DynamicsKind; 5] = [
        DynamicsKind::Flat,
        DynamicsKind::Sphere,
        DynamicsKind::Normalized,
        DynamicsKind::HeadNormalized,
        DynamicsKind::ReluSphere,
    ];

    pub fn on_sphere(self) -> bool {
        self != DynamicsKind::Flat
    }

    pub fn is_softmax(self) -> bool {
        self != DynamicsKind::ReluSphere
    }

    pub fn name(self) -> &'static str {
        match self {
            DynamicsKind::Flat => "flat",
            DynamicsKind::Sphere => "sphere",
            DynamicsKind::Normalized => "normalized",
            DynamicsKind::HeadNormalized => "head_normalized",
            DynamicsKind::ReluSphere => "relu_sphere",
        }
    }
}

impl std::str::FromStr for DynamicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        DynamicsKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dynamics kind '{s}'")))
    }
}

impl std::fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Token derivatives `dx_i/dt` of a softmax dynamics, read off a flow state.
pub fn token_derivatives(state: &FlowState, kind: DynamicsKind) -> Result<Vec<DVector<f64>>> {
    let n = state.n();
    let out: Vec<DVector<f64>> = match kind {
        DynamicsKind::Flat => state.velocities.clone(),
        DynamicsKind::Sphere => state
            .velocities
            .iter()
            .zip(&state.tokens)
            .map(|(v, x)| project_raw(x, v))
            .collect(),
        DynamicsKind::Normalized => (0..n)
            .map(|i| {
                let x = &state.tokens[i];
                let mut w = DVector::zeros(x.len());
                for (h, u) in state.attention_outputs[i].iter().enumerate() {
                    let share = (state.log_partition_sums[i][h] - state.log_token_partition[i]).exp();
                    w.axpy(share, u, 1.0);
                }
                project_raw(x, &(w / n as f64))
            })
            .collect(),
        DynamicsKind::HeadNormalized => (0..n)
            .map(|i| {
                let x = &state.tokens[i];
                let mut w = DVector::zeros(x.len());
                for u in &state.attention_outputs[i] {
                    w += u;
                }
                project_raw(x, &w)
            })
            .collect(),
        DynamicsKind::ReluSphere => {
            return Err(Error::InvalidArgument(
                "relu dynamics do not use softmax aggregations; call velocity_field".into(),
            ))
        }
    };
    check_finite(&out)?;
    Ok(out)
}

fn check_finite(vs: &[DVector<f64>]) -> Result<()> {
    if let Some((token, v)) = vs.iter().enumerate().find(|(_, v)| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::NumericalBlowup {
            token,
            detail: format!("non-finite velocity (norm {})", v.norm()),
        });
    }
    Ok(())
}

fn relu_field(xs: &[DVector<f64>], heads: &[HeadSpec]) -> Result<Vec<DVector<f64>>> {
    let n = xs.len();
    let d = xs[0].len();
    if let Some(bad) = heads.iter().find(|h| h.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.dim() });
    }
    let mut v = vec![DVector::zeros(d); n];
    for head in heads {
        let mx: Vec<DVector<f64>> = xs.iter().map(|x| head.apply_score(x)).collect();
        let wx: Vec<DVector<f64>> = if head.has_value_perturbation() {
            xs.iter().map(|x| head.apply_value(x)).collect()
        } else {
            mx.clone()
        };
        for i in 0..n {
            for j in 0..n {
                let s = xs[i].dot(&mx[j]);
                if s > 0.0 {
                    v[i].axpy(s, &wx[j], 1.0);
                }
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let out: Vec<DVector<f64>> = v.iter().zip(xs).map(|(v, x)| project_raw(x, &(v * inv_n))).collect();
    check_finite(&out)?;
    Ok(out)
}

/// `dx_i/dt` at arbitrary positions.
pub fn velocity_field(
    xs: &[DVector<f64>],
    beta: f64,
    heads: &[HeadSpec],
    kind: DynamicsKind,
) -> Result<Vec<DVector<f64>>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("no tokens".into()));
    }
    match kind {
        DynamicsKind::ReluSphere => relu_field(xs, heads),
        _ => token_derivatives(&flow_state_raw(xs, beta, heads)?, kind),
    }
}

/// One RK4 step on raw positions. Sphere variants are renormalized token-wise.
pub fn step_positions(
    xs: &[DVector<f64>],
    beta: f64,
    heads: &[HeadSpec],
    kind: DynamicsKind,
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    if !dt.is_finite() || dt == 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be finite and nonzero, got {dt}")));
    }
    let shifted = |base: &[DVector<f64>], k: &[DVector<f64>], h: f64| -> Vec<DVector<f64>> {
        base.iter().zip(k).map(|(x, k)| x + k * h).collect()
    };
    let k1 = velocity_field(xs, beta, heads, kind)?;
    let k2 = velocity_field(&shifted(xs, &k1, 0.5 * dt), beta, heads, kind)?;
    let k3 = velocity_field(&shifted(xs, &k2, 0.5 * dt), beta, heads, kind)?;
    let k4 = velocity_field(&shifted(xs, &k3, dt), beta, heads, kind)?;
    let mut out = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let incr = (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (dt / 6.0);
        let next = x + incr;
        if kind.on_sphere() {
            let norm = next.norm();
            if !norm.is_finite() || norm <= DEGENERATE_NORM {
                return Err(Error::NumericalBlowup { token: i, detail: format!("position norm {norm}") });
            }
            out.push(next / norm);
        } else {
            if next.iter().any(|c| !c.is_finite()) {
                return Err(Error::NumericalBlowup { token: i, detail: "non-finite position".into() });
            }
            out.push(next);
        }
    }
    Ok(out)
}

/// One RK4 step of a sphere variant.
///
/// Flat steps leave the sphere and cannot be represented as a configuration;
/// use [`step_positions`] for them.
pub fn step(
    cfg: &TokenConfiguration,
    heads: &[HeadSpec],
    kind: DynamicsKind,
    dt: f64,
) -> Result<TokenConfiguration> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !kind.on_sphere() {
        return Err(Error::InvalidArgument(
            "flat dynamics leave the sphere; use step_positions".into(),
        ));
    }
    let next = step_positions(&cfg.vectors(), cfg.beta(), heads, kind, dt)?;
    let tokens = next.into_iter().map(UnitVector::new).collect::<Result<Vec<_>>>()?;
    TokenConfiguration::new(tokens, cfg.beta())
}

/// Sampling schedule for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    pub record_pairwise: bool,
    #[serde(default)]
    pub record_positions: bool,
}

impl Schedule {
    pub fn new(dt: f64, t_end: f64, sample_every: usize) -> Self {
        Self { dt, t_end, sample_every, record_pairwise: false, record_positions: false }
    }

    pub fn with_pairwise(mut self) -> Self {
        self.record_pairwise = true;
        self
    }

    pub fn with_positions(mut self) -> Self {
        self.record_positions = true;
        self
    }

    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidArgument("sample_every must be at least 1".into()));
        }
        Ok(((self.t_end / self.dt).round() as usize).max(1))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(DEFAULT_DT, 10.0, DEFAULT_SAMPLE_EVERY)
    }
}

/// Sampled time series of one run. All series share the index of `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub kind: DynamicsKind,
    pub times: Vec<f64>,
    pub energies: Vec<EnergyReport>,
    pub mean_alignment: Vec<f64>,
    pub alignment_spread: Vec<f64>,
    pub pairwise_alignments: Option<Vec<Vec<Vec<f64>>>>,
    /// Raw positions `[sample][token][coordinate]`, when requested.
    #[serde(default)]
    pub positions: Option<Vec<Vec<Vec<f64>>>>,
    /// `[sample][token][head]`.
    pub entropies: Vec<Vec<Vec<f64>>>,
    /// `dH_i^h/dt`, `[sample][token][head]`.
    pub entropy_production: Vec<Vec<Vec<f64>>>,
    pub condition_tau_ok: Vec<bool>,
    pub min_tau_margin: Vec<f64>,
    /// `max_i | |x_i| - 1 |`.
    pub sphere_drift: Vec<f64>,
    pub t_crit: Option<f64>,
    pub halted_at: Option<f64>,
    pub final_positions: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn total_energy(&self) -> Vec<f64> {
        self.energies.iter().map(|e| e.total).collect()
    }

    pub fn mean_entropy(&self) -> Vec<f64> {
        self.entropies.iter().map(|s| mean(s.iter().flatten())).collect()
    }

    pub fn mean_entropy_production(&self) -> Vec<f64> {
        self.entropy_production.iter().map(|s| mean(s.iter().flatten())).collect()
    }

    /// Final positions as a configuration; fails for flat runs that left the sphere.
    pub fn final_configuration(&self, beta: f64) -> Result<TokenConfiguration> {
        let tokens = self
            .final_positions
            .iter()
            .map(|p| UnitVector::try_from(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        TokenConfiguration::new(tokens, beta)
    }
}

fn mean<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 { 0.0 } else { s / c as f64 }
}

fn cosine_matrix(xs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = xs.iter().map(|x| x.norm()).collect();
    xs.iter()
        .enumerate()
        .map(|(i, a)| xs.iter().enumerate().map(|(j, b)| a.dot(b) / (norms[i] * norms[j])).collect())
        .collect()
}

fn pair_stats(c: &[Vec<f64>]) -> (f64, f64) {
    let n = c.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            sum += c[i][j];
            count += 1;
            lo = lo.min(c[i][j]);
            hi = hi.max(c[i][j]);
        }
    }
    if count == 0 { (1.0, 0.0) } else { (sum / count as f64, hi - lo) }
}

struct Sampler<'a> {
    heads: &'a [HeadSpec],
    kind: DynamicsKind,
    beta: f64,
    rec: TrajectoryRecord,
    low_kinetic_run: usize,
}

impl Sampler<'_> {
    fn sample(&mut self, t: f64, xs: &[DVector<f64>], schedule: &Schedule) -> Result<()> {
        let state = flow_state_raw(xs, self.beta, self.heads)?;
        let derivs = velocity_field(xs, self.beta, self.heads, self.kind)?;
        let energy = energy_report(&state, self.kind, &derivs)?;
        let entropy = entropy_report(&state, self.heads, &derivs)?;
        let tau = radial_dominance_of(&state);
        let cos = cosine_matrix(xs);
        let (mean_alignment, spread) = pair_stats(&cos);
        let margin = tau.min_margin();

        let rec = &mut self.rec;
        if let (Some(&prev_t), Some(&prev_m)) = (rec.times.last(), rec.min_tau_margin.last()) {
            if rec.t_crit.is_none() && prev_m >= 0.0 && margin < 0.0 {
                rec.t_crit = Some(prev_t + (t - prev_t) * prev_m / (prev_m - margin));
            }
        } else if margin < 0.0 {
            rec.t_crit = Some(t);
        }
        if energy.kinetic < HALT_KINETIC {
            self.low_kinetic_run += 1;
            if self.low_kinetic_run == HALT_SAMPLES && rec.halted_at.is_none() {
                rec.halted_at = Some(rec.times[rec.times.len() + 1 - HALT_SAMPLES]);
            }
        } else {
            self.low_kinetic_run = 0;
        }

        rec.times.push(t);
        rec.energies.push(energy);
        rec.mean_alignment.push(mean_alignment);
        rec.alignment_spread.push(spread);
        if schedule.record_pairwise {
            rec.pairwise_alignments.get_or_insert_with(Vec::new).push(cos);
        }
        if schedule.record_positions {
            let pos = xs.iter().map(|x| x.as_slice().to_vec()).collect();
            rec.positions.get_or_insert_with(Vec::new).push(pos);
        }
        rec.entropies.push(entropy.entropy);
        rec.entropy_production.push(entropy.production_rate);
        rec.condition_tau_ok.push(tau.all_satisfied());
        rec.min_tau_margin.push(margin);
        rec.sphere_drift.push(xs.iter().map(|x| (x.norm() - 1.0).abs()).fold(0.0, f64::max));
        Ok(())
    }
}

/// Integrates from `cfg` to `schedule.t_end`, recording every `sample_every` steps and the final state.
pub fn integrate(
    cfg: &TokenConfiguration,
    heads: &[HeadSpec],
    kind: DynamicsKind,
    schedule: &Schedule,
) -> Result<TrajectoryRecord> {
    let steps = schedule.steps()?;
    let mut sampler = Sampler {
        heads,
        kind,
        beta: cfg.beta(),
        rec: TrajectoryRecord {
            kind,
            times: Vec::new(),
            energies: Vec::new(),
            mean_alignment: Vec::new(),
            alignment_spread: Vec::new(),
            pairwise_alignments: None,
            positions: None,
            entropies: Vec::new(),
            entropy_production: Vec::new(),
            condition_tau_ok: Vec::new(),
            min_tau_margin: Vec::new(),
            sphere_drift: Vec::new(),
            t_crit: None,
            halted_at: None,
            final_positions: Vec::new(),
        },
        low_kinetic_run: 0,
    };
    let mut xs = cfg.vectors();
    sampler.sample(0.0, &xs, schedule)?;
    for k in 1..=steps {
        xs = step_positions(&xs, cfg.beta(), heads, kind, schedule.dt)?;
        if k % schedule.sample_every == 0 || k == steps {
            sampler.sample(k as f64 * schedule.dt, &xs, schedule)?;
        }
    }
    sampler.rec.final_positions = xs.iter().map(|x| x.as_slice().to_vec()).collect();
    Ok(sampler.rec)
}

/// Advances raw positions by `t` (negative for backward) in `substeps` RK4 steps.
pub(crate) fn flow_map(
    xs: &[DVector<f64>],
    beta: f64,
    heads: &[HeadSpec],
    kind: DynamicsKind,
    t: f64,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    let h = t / substeps as f64;
    let mut cur = xs.to_vec();
    for _ in 0..substeps {
        cur = step_positions(&cur, beta, heads, kind, h)?;
    }
    Ok(cur)
}

/// `n` normalized standard Gaussian tokens from a seeded ChaCha8 stream.
pub fn random_configuration(n: usize, d: usize, beta: f64, seed: u64) -> Result<TokenConfiguration> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2 and d >= 2, got n={n}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(n);
    while tokens.len() < n {
        let v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        // A zero draw has probability zero; skip it rather than fail.
        if let Ok(u) = crate::geometry::renormalize(&v) {
            tokens.push(u);
        }
    }
    TokenConfiguration::new(tokens, beta)
}

/// Tokens `x_i = a u + b e_i` with all pairwise inner products equal to `gamma0`.
pub fn equiangular_configuration(n: usize, d: usize, gamma0: f64, beta: f64) -> Result<TokenConfiguration> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    if d < n {
        return Err(Error::InvalidArgument(format!("need d >= n, got d={d}, n={n}")));
    }
    let lower = -1.0 / (n as f64 - 1.0);
    if !(gamma0 > lower && gamma0 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma0 = {gamma0} outside the open interval ({lower}, 1)"
        )));
    }
    let nf = n as f64;
    let b = (1.0 - gamma0).sqrt();
    let a = -b / nf.sqrt() + ((1.0 + (nf - 1.0) * gamma0) / nf).sqrt();
    let u_coord = a / nf.sqrt();
    let tokens = (0..n)
        .map(|i| {
            let mut v = DVector::zeros(d);
            for k in 0..n {
                v[k] = u_coord;
            }
            v[i] += b;
            // Exact up to rounding; renormalize so the unit-norm invariant holds to 1e-12.
            let norm = v.norm();
            UnitVector::new(v / norm)
        })
        .collect::<Result<Vec<_>>>()?;
    TokenConfiguration::new(tokens, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clustered(n: usize, d: usize) -> TokenConfiguration {
        TokenConfiguration::new(vec![UnitVector::basis(d, 0); n], 1.0).unwrap()
    }

    #[test]
    fn clustered_state_is_fixed() {
        let cfg = clustered(4, 3);
        let heads = [HeadSpec::scalar(1.0, 3)];
        for kind in [DynamicsKind::Sphere, DynamicsKind::Normalized, DynamicsKind::HeadNormalized] {
            let next = step(&cfg, &heads, kind, 1e-2).unwrap();
            for (a, b) in next.tokens().iter().zip(cfg.tokens()) {
                assert!((a.as_vector() - b.as_vector()).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn antipodal_pair_is_stationary() {
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let cfg = TokenConfiguration::new(
            vec![UnitVector::new(x.clone()).unwrap(), UnitVector::new(-x).unwrap()],
            1.0,
        )
        .unwrap();
        let next = step(&cfg, &[HeadSpec::scalar(1.3, 3)], DynamicsKind::Sphere, 1e-2).unwrap();
        assert_eq!(next, cfg);
    }

    #[test]
    fn flat_step_requires_positions_api() {
        let cfg = random_configuration(3, 3, 1.0, 1).unwrap();
        assert!(step(&cfg, &[HeadSpec::scalar(1.0, 3)], DynamicsKind::Flat, 1e-2).is_err());
        let xs = step_positions(&cfg.vectors(), 1.0, &[HeadSpec::scalar(1.0, 3)], DynamicsKind::Flat, 1e-2).unwrap();
        assert!(xs.iter().any(|x| (x.norm() - 1.0).abs() > 1e-6));
    }

    #[test]
    fn one_step_matches_two_half_steps() {
        let cfg = random_configuration(5, 6, 1.0, 7).unwrap();
        let heads = [HeadSpec::scalar(1.0, 6), HeadSpec::scalar(0.5, 6)];
        let xs = cfg.vectors();
        let mut prev = f64::NAN;
        for &dt in &[0.08, 0.04] {
            let full = step_positions(&xs, 1.0, &heads, DynamicsKind::Sphere, dt).unwrap();
            let half = step_positions(&xs, 1.0, &heads, DynamicsKind::Sphere, dt / 2.0).unwrap();
            let half = step_positions(&half, 1.0, &heads, DynamicsKind::Sphere, dt / 2.0).unwrap();
            let err = full.iter().zip(&half).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            if prev.is_finite() {
                // Local error is O(dt^5): halving dt cuts it by ~32.
                assert!(prev / err > 20.0, "ratio {}", prev / err);
            }
            prev = err;
        }
    }

    #[test]
    fn random_configuration_is_deterministic_and_unit() {
        let a = random_configuration(8, 20, 1.0, 42).unwrap();
        let b = random_configuration(8, 20, 1.0, 42).unwrap();
        let c = random_configuration(8, 20, 1.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in a.tokens() {
            assert!((t.as_vector().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn high_dimensional_tokens_are_nearly_orthogonal() {
        let d = 400;
        let bound = 5.0 / (d as f64).sqrt();
        let failures = (0..100u64)
            .filter(|&seed| {
                let g = random_configuration(8, d, 1.0, seed).unwrap().gram();
                (0..8).any(|i| (0..8).any(|j| i != j && g[(i, j)].abs() >= bound))
            })
            .count();
        assert!(failures <= 2, "{failures} seeds exceeded the bound");
    }

    #[test]
    fn equiangular_gram_matrix() {
        let cfg = equiangular_configuration(8, 20, 0.05, 1.0).unwrap();
        let g = cfg.gram();
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { 1.0 } else { 0.05 };
                assert!((g[(i, j)] - expected).abs() < 1e-12);
            }
        }
        let ortho = equiangular_configuration(4, 4, 0.0, 1.0).unwrap();
        assert!((ortho.gram() - nalgebra::DMatrix::identity(4, 4)).abs().max() < 1e-15);
    }

    #[test]
    fn equiangular_rejects_out_of_range() {
        assert!(equiangular_configuration(4, 4, 1.0, 1.0).is_err());
        assert!(equiangular_configuration(4, 4, -1.0 / 3.0, 1.0).is_err());
        assert!(equiangular_configuration(4, 3, 0.1, 1.0).is_err());
    }

    #[test]
    fn equiangular_scalar_run_clusters_monotonically() {
        let cfg = equiangular_configuration(8, 8, 0.05, 1.0).unwrap();
        let heads = [HeadSpec::scalar(1.0, 8)];
        let rec = integrate(&cfg, &heads, DynamicsKind::Sphere, &Schedule::new(1e-2, 30.0, 10)).unwrap();
        let g = &rec.mean_alignment;
        for (k, w) in g.windows(2).enumerate() {
            assert!(w[1] >= w[0] - 1e-14, "sample {k}: {} -> {}", w[0], w[1]);
        }
        assert!(*g.last().unwrap() > 0.99);
        let e = rec.total_energy();
        assert!(e.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        assert!(rec.alignment_spread.iter().all(|&s| s <= 1e-8));
        assert!(rec.sphere_drift.iter().all(|&s| s <= 1e-12));
    }

    #[test]
    fn tau_fails_at_start_above_critical_beta() {
        let n = 8;
        let beta_star = crate::thresholds::critical_beta(1.0, 2, n).unwrap();
        let cfg = TokenConfiguration::new((0..n).map(|i| UnitVector::basis(n, i)).collect(), 1.05 * beta_star).unwrap();
        let heads = [HeadSpec::scalar(1.0, n), HeadSpec::scalar(1.0, n)];
        let rec = integrate(&cfg, &heads, DynamicsKind::Sphere, &Schedule::new(1e-2, 0.1, 5)).unwrap();
        assert!(!rec.condition_tau_ok[0]);
        assert_eq!(rec.t_crit, Some(0.0));
    }

    #[test]
    fn clustered_run_reports_halt() {
        let cfg = clustered(3, 3);
        let rec = integrate(&cfg, &[HeadSpec::scalar(1.0, 3)], DynamicsKind::Sphere, &Schedule::new(1e-2, 0.1, 1)).unwrap();
        assert_eq!(rec.halted_at, Some(0.0));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("head-normalized".parse::<DynamicsKind>().unwrap(), DynamicsKind::HeadNormalized);
        assert!("bogus".parse::<DynamicsKind>().is_err());
    }
}
