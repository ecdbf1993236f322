//! Deterministic simulator and verification suite for an N-party protocol
//! that shares, passes, and retrieves an arbitrary two-qubit state using
//! only Bell pairs and Bell-state measurements.
//!
//! The crate is layered:
//!
//! * [`quantum`] — a dense register with addressable qubits, Bell-pair
//!   preparation, Bell measurement, and density-matrix diagnostics.
//! * [`frame`] — the classical Pauli frame: every announced outcome folds
//!   into a two-slot correction word via XOR.
//! * [`protocol`] — the session engine: pair topology, receiver directives,
//!   entanglement swaps, feeding, chain passing, retrieval, and exhaustive
//!   branch enumeration.
//! * [`netsim`] — the same protocol driven through a simulated classical
//!   network of message-passing party actors.
//! * [`adversary`] — collusion attacks, what colluders can and cannot see,
//!   detection rounds, and localization sweeps.
//! * [`resources`] — resource ledgers, audits, and scheme comparisons.
//! * [`report`] — serializable transcripts and run reports.

pub mod error;
pub mod frame;
pub mod netsim;
pub mod protocol;
pub mod quantum;
pub mod report;
pub mod resources;

pub use error::{Error, Result};
pub use frame::{FrameState, PauliWord2, PayloadSlot};
pub use protocol::{
    enumerate_branches, run_full, EnumerationSummary, Materialization, Phase, ProtocolConfig,
    RetrievalOutcome, Session, Topology, TwoQubitState, FIDELITY_EXIT_THRESHOLD, MAX_PARTIES,
};
pub use quantum::{BellLabel, DensityMatrix, Party, QubitRef, StateVector};
pub use report::{DisclosurePolicy, Driver, MeasurementRecord, RecordKind, RunReport};
pub use resources::{audit, ledger_formula, AuditOutcome, ResourceLedger, Scheme};
