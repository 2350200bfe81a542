//! Multi-head self-attention as an interacting particle system on the unit sphere.
//!
//! Tokens `x_1..x_n` on S^{d-1} move under softmax attention with one or more
//! heads. The crate evaluates the aggregations and energies, integrates the
//! flow, evaluates the closed-form thresholds of the scalar-head regime and
//! checks the exact identities against finite-difference oracles.
//!
//! ```
//! use sphereflow::{attention::HeadSpec, dynamics, energy};
//!
//! let cfg = dynamics::equiangular_configuration(8, 8, 0.05, 1.0).unwrap();
//! let heads = [HeadSpec::scalar(1.0, 8)];
//! let state = sphereflow::attention::compute_flow_state(&cfg, &heads).unwrap();
//! let rate = energy::total_energy_rate(&state, dynamics::DynamicsKind::Sphere).unwrap();
//! assert!(rate > 0.0);
//! ```

pub mod attention;
pub mod dynamics;
pub mod energy;
pub mod entropy;
pub mod equiangular;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod thresholds;

pub use error::{Error, Result};
