//! Transcript and report records shared by the engine, the network
//! simulation, the adversary harness, and the CLI output layer.
//!
//! Reports are plain serde data: serializing the same run twice yields
//! byte-identical JSON, and deserializing restores an equal value.

use serde::{Deserialize, Serialize};

use crate::frame::PauliWord2;
use crate::quantum::{BellLabel, Party, QubitRef};
use crate::resources::ResourceLedger;

/// Version stamp written into every serialized report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// When measurement outcomes are broadcast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisclosurePolicy {
    /// Each outcome is announced as soon as it is produced.
    Immediate,
    /// All outcomes are announced in one batch after delivery.
    #[default]
    Deferred,
}

/// Which engine produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    /// Direct in-process engine (`run_full`).
    Engine,
    /// Message-passing drive over the simulated network (`run_distributed`).
    Distributed,
}

/// What a Bell measurement was for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// One of the two feeding measurements; the payload index it consumed.
    Feed { leg: u8 },
    /// A chain pass, numbered from 1.
    Pass { step: u16 },
    /// An entanglement swap merging two pairs (receiver change or chain
    /// contraction).
    Swap,
    /// An adversarial measurement that is never announced.
    Covert,
}

/// One Bell measurement with its classical context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub sequence: u32,
    pub actor: Party,
    pub kind: RecordKind,
    pub qubits: (QubitRef, QubitRef),
    pub outcome: BellLabel,
    /// Whether the outcome has been broadcast. Flips when the announcement
    /// goes out; covert records never flip.
    pub announced: bool,
}

impl MeasurementRecord {
    /// Equality that ignores the announcement flag, for comparing a
    /// receiver's knowledge against the authoritative transcript.
    pub fn same_measurement(&self, other: &MeasurementRecord) -> bool {
        self.sequence == other.sequence
            && self.actor == other.actor
            && self.kind == other.kind
            && self.qubits == other.qubits
            && self.outcome == other.outcome
    }
}

/// Classical event classes logged by both drivers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    OrderDirective,
    PairPrepared,
    Measurement,
    Announce,
    TestRequest,
    TestResponse,
    Retrieval,
}

/// One timestamped classical event. `bits` carries the small integers the
/// event transports (outcome bits, directive indices, pair origin codes).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: u64,
    pub kind: EventKind,
    pub sender: String,
    pub bits: Vec<u8>,
}

/// Complete machine-readable account of one protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub parties: u16,
    pub receiver: u16,
    pub seed: u64,
    pub policy: DisclosurePolicy,
    pub driver: Driver,
    /// Fidelity between the retrieved state and the fed payload.
    pub fidelity: f64,
    /// Probability of the realized measurement branch.
    pub branch_probability: f64,
    /// Correction word the receiver applied at retrieval.
    pub correction: PauliWord2,
    pub transcript: Vec<MeasurementRecord>,
    pub ledger: ResourceLedger,
    pub events: Vec<EventRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_identity_ignores_announcement_state() {
        let a = MeasurementRecord {
            sequence: 3,
            actor: Party::Member(2),
            kind: RecordKind::Pass { step: 1 },
            qubits: (
                QubitRef::new(Party::Member(1), 0),
                QubitRef::new(Party::Member(1), 1),
            ),
            outcome: BellLabel::new(1, 0),
            announced: false,
        };
        let mut b = a.clone();
        b.announced = true;
        assert!(a.same_measurement(&b));
        b.outcome = BellLabel::new(0, 0);
        assert!(!a.same_measurement(&b));
    }
}
