//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while configuring or driving a session.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejected configuration (party count, receiver index, scenario fields).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was invoked on state that does not satisfy its
    /// preconditions (wrong qubits, wrong initial state, missing pair).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An operation was invoked out of protocol order (feed before setup,
    /// retrieve before delivery, duplicate directive).
    #[error("protocol order violated: {0}")]
    ProtocolOrder(String),

    /// A forced measurement outcome has probability numerically
    /// indistinguishable from zero on the current branch.
    #[error("forced outcome lies on a zero-probability branch (p = {probability:.3e})")]
    ZeroBranch { probability: f64 },

    /// Qubits scheduled for retirement are still entangled with the rest of
    /// the register; `residual` is the weight outside the dominant product
    /// component.
    #[error("cannot retire entangled qubits (residual weight {residual:.3e})")]
    EntangledRetirement { residual: f64 },

    /// A register or operator was combined with one of incompatible size.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Retrieval was attempted from an announcement set that does not cover
    /// the measurements the directive requires.
    #[error("announcement transcript incomplete: {missing} record(s) missing")]
    IncompleteTranscript { missing: usize },

    /// Numerical guard tripped (norm drift, non-physical density matrix).
    #[error("numerical guard tripped: {0}")]
    Numerical(String),
}
