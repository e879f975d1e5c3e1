//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("pipe endpoint `{0}` does not exist")]
    DanglingEndpoint(String),
    #[error("non-positive parameter: {0}")]
    NonPositiveParameter(String),
    #[error("network graph is disconnected")]
    Disconnected,
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("operation requires a tree network (n = m + 1)")]
    NotATree,
    #[error("invalid deletion index: {0}")]
    InvalidDeletion(String),

    #[error("local depletion: density at segment {segment} reached the floor")]
    Depletion { segment: usize },
    #[error("non-positive density at node {node}")]
    NonPositiveDensity { node: usize },
    #[error("singular reduced mass matrix: {0}")]
    Regularity(String),
    #[error("injections do not balance: sum(d) = {0}")]
    UnbalancedInjections(f64),
    #[error("infeasible operating point: {0}")]
    Infeasible(String),
    #[error("no positive real root of the balancing-node momentum quadratic")]
    NoPositiveRoot,
    #[error("double root of the balancing-node momentum quadratic (dQ/drho0 = 0)")]
    DoubleRoot,
    #[error("sigmoid source: {0}")]
    SigmoidSource(String),
    #[error("step size underflow at t = {t} (stiffness failure)")]
    StepSizeUnderflow { t: f64 },
    #[error("Newton iteration failed to converge: {0}")]
    NewtonFailure(String),

    #[error("schema violation: {0}")]
    Schema(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code contract: 0 success, 2 depletion, 3 rho_min
    /// violation, 4 input error, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Depletion { .. } => 2,
            DuplicateNodeId(_) | DanglingEndpoint(_) | NonPositiveParameter(_) | Disconnected
            | UnknownNode(_) | NotATree | InvalidDeletion(_) | Schema(_) | Scenario(_)
            | Io(_) | Json(_) => 4,
            _ => 5,
        }
    }
}
