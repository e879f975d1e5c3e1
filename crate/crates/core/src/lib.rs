//! Simulation models for slow linepack-depletion dynamics of isothermal
//! natural-gas pipeline networks.
//!
//! A pipeline network is reduced to an implicit ODE `M_x xdot = G(x)` by
//! integrating the isothermal Euler equations over short line segments.
//! Because the mass matrix is singular when flux injections are specified
//! at every node, three boundary-condition techniques restore regularity:
//!
//! * [`slack`] — one node holds a specified density and draws from an
//!   infinite flux reservoir;
//! * [`sigmoid`] — a slack source whose injection saturates through a
//!   sigmoid with a density-droop curve (finite flux reservoir);
//! * [`balancing`] — all injections fixed, one nodal density turned into
//!   an algebraic variable solved from a momentum balance.
//!
//! The numeric core is generic over the scalar type (see [`scalar::Scalar`]);
//! concrete `f64` aliases are exported at the crate root.

pub mod balancing;
pub mod dynamics;
pub mod error;
pub mod inputs;
pub mod integrator;
pub mod linalg;
pub mod network;
pub mod scalar;
pub mod scenario;
pub mod sigmoid;
pub mod slack;
pub mod steady;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type used by the CLI and the shipped scenarios.
pub type DefaultScalar = f64;

pub type DiscretizedNetwork = network::DiscretizedNetwork<DefaultScalar>;
pub type MatrixSet = network::MatrixSet<DefaultScalar>;
pub type StateVector = dynamics::StateVector<DefaultScalar>;
pub type Trajectory = integrator::Trajectory<DefaultScalar>;
