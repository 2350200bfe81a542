//! Experiment scenarios, output files, parameter sweeps and the verification report.

pub mod output;
pub mod scenario;
pub mod sweep;
pub mod verify;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::HeadSpec;
use crate::error::{Error, Result};

pub use output::{Column, Manifest, Table};
pub use scenario::{run_scenario, run_scenario_to, ExperimentSpec, HeadLayout, Init, Parameters, Scenario, ScenarioResult};
pub use sweep::{sweep, SweepGrid, SweepParameter, SweepResult};
pub use verify::{verify_all, Check, VerificationReport, VerifySizes};

/// `lambda_h P_h`, with `P_h` projecting onto the h-th of `lambdas.len()` contiguous coordinate blocks.
pub fn block_projection_heads(d: usize, lambdas: &[f64]) -> Result<Vec<HeadSpec>> {
    let h = lambdas.len();
    if h == 0 || d < h {
        return Err(Error::InvalidArgument(format!("cannot split d={d} into {h} blocks")));
    }
    let mut start = 0;
    lambdas
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let len = d / h + usize::from(k < d % h);
            let head = HeadSpec::coordinate_projection(d, start..start + len);
            start += len;
            if l == 1.0 { Ok(head) } else { HeadSpec::from_matrix(head.score_matrix() * l) }
        })
        .collect()
}

/// Symmetric Gaussian score matrices `(A + A^T) / (2 sqrt(d))`, seeded.
pub fn random_symmetric_heads(d: usize, count: usize, seed: u64) -> Result<Vec<HeadSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (2.0 * (d as f64).sqrt());
    (0..count)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
            HeadSpec::from_matrix((&a + a.transpose()) * scale)
        })
        .collect()
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| {
        let slope = sxy / sxx;
        (slope, my - slope * mx)
    })
}

/// Order-preserving map, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}
