//! Geometry of the unit sphere S^{d-1} embedded in R^d.
//!
//! Tokens live on the sphere and every admissible velocity is tangent to it.
//! The tangential projection `P_x(v) = v - <v, x> x` is the only operator the
//! rest of the crate needs, together with the split of an aggregation vector
//! into its radial and tangential parts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for the projection identities.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Absolute tolerance for Pythagoras on the radial/tangential split.
pub const PYTHAGORAS_TOL: f64 = 1e-10;
/// Norms below this are treated as exactly zero.
pub const DEGENERATE_NORM: f64 = 1e-14;
/// Allowed deviation of a unit vector's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// A point on S^{d-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(DVector<f64>);

impl UnitVector {
    /// Wraps `v`, rejecting vectors whose norm is not 1 within [`UNIT_NORM_TOL`].
    pub fn new(v: DVector<f64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidArgument(format!(
                "vector norm {norm} is not 1 within {UNIT_NORM_TOL}"
            )));
        }
        Ok(Self(v))
    }

    /// The i-th standard basis vector of R^d.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        UnitVector::new(DVector::from_vec(v))
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0.as_slice().to_vec()
    }
}

/// Radial/tangential split of an aggregation `f` at a token `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialTangential {
    /// `<f, x>`.
    pub radial: f64,
    /// `|P_x(f)|`.
    pub tangential_norm: f64,
    /// `|radial| / |f|`, the cosine of the angle between `f` and `x`.
    pub alignment_fraction: f64,
}

impl RadialTangential {
    pub const ZERO: RadialTangential = RadialTangential {
        radial: 0.0,
        tangential_norm: 0.0,
        alignment_fraction: 0.0,
    };
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `P_x(v) = v - <v, x> x`.
pub fn project_tangent(x: &UnitVector, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(x.dim(), v.len())?;
    Ok(project_raw(x.as_vector(), v))
}

/// Same formula without the unit-norm guarantee on `x`.
///
/// The integrator evaluates the vector field at intermediate stage points that
/// sit slightly off the sphere; the formula is used unchanged there, which keeps
/// the sphere an invariant manifold of the extended field.
pub(crate) fn project_raw(x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let radial = v.dot(x);
    v - x * radial
}

/// Splits `f` into radial and tangential parts relative to `x`.
pub fn decompose(x: &UnitVector, f: &DVector<f64>) -> Result<RadialTangential> {
    check_dims(x.dim(), f.len())?;
    Ok(decompose_raw(x.as_vector(), f))
}

pub(crate) fn decompose_raw(x: &DVector<f64>, f: &DVector<f64>) -> RadialTangential {
    let f_norm = f.norm();
    if f_norm < DEGENERATE_NORM {
        return RadialTangential::ZERO;
    }
    let radial = f.dot(x);
    let tangential_norm = project_raw(x, f).norm();
    RadialTangential {
        radial,
        tangential_norm,
        alignment_fraction: (radial.abs() / f_norm).min(1.0),
    }
}

/// Projects `v` back onto the sphere.
pub fn renormalize(v: &DVector<f64>) -> Result<UnitVector> {
    let norm = v.norm();
    if !norm.is_finite() || norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateState(format!(
            "cannot normalize vector of norm {norm}"
        )));
    }
    Ok(UnitVector(v / norm))
}
