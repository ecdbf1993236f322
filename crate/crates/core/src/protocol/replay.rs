//! Classical reconstruction of the correction word from announced records.
//!
//! This is the receiver's side of the story: no amplitudes, no engine
//! internals — only the public pair labels, the announced measurement
//! records, and XOR arithmetic. The engine cross-checks its own Pauli
//! frame against this replay at retrieval.

use crate::error::{Error, Result};
use crate::frame::{FrameState, PauliWord2, PayloadSlot};
use crate::quantum::{BellLabel, Party, QubitRef};
use crate::report::{MeasurementRecord, RecordKind};

use super::topology::Topology;

/// What a classical replay of the announcements yields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayOutcome {
    /// Correction word the receiver must apply, first carrier in slot 1.
    pub word: PauliWord2,
    /// Final holder of both shares.
    pub receiver: Party,
    /// Addresses the shares arrived on.
    pub carriers: (QubitRef, QubitRef),
}

#[derive(Clone, Copy)]
struct TrackedPair {
    a: QubitRef,
    b: QubitRef,
    label: BellLabel,
    consumed: bool,
}

impl TrackedPair {
    fn partner_of(&self, q: QubitRef) -> Option<QubitRef> {
        if q == self.a {
            Some(self.b)
        } else if q == self.b {
            Some(self.a)
        } else {
            None
        }
    }
}

fn find_live(pairs: &[TrackedPair], q: QubitRef) -> Result<usize> {
    pairs
        .iter()
        .position(|p| !p.consumed && (p.a == q || p.b == q))
        .ok_or_else(|| {
            Error::ProtocolOrder(format!("record measures {q}, which is not a live pair half"))
        })
}

/// Replays announced records into the correction word.
///
/// Records are processed in sequence order. The replay rebuilds the public
/// pair layout, folds swap announcements into merged pair labels, consumes
/// the two feed announcements, then walks the pass announcements while
/// tracking which address carries each share. Inconsistent, duplicated, or
/// misordered records are rejected.
pub fn replay_retrieval(parties: u16, records: &[MeasurementRecord]) -> Result<ReplayOutcome> {
    let layout = Topology::build(parties)?;
    let mut pairs: Vec<TrackedPair> = layout
        .pairs()
        .iter()
        .map(|p| TrackedPair {
            a: p.a,
            b: p.b,
            label: p.label,
            consumed: false,
        })
        .collect();

    let mut ordered: Vec<&MeasurementRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.sequence);

    let passes = ordered
        .iter()
        .filter(|r| matches!(r.kind, RecordKind::Pass { .. }))
        .count() as u16;
    let chain_len = passes + 1;

    let mut channels: [Option<(BellLabel, BellLabel)>; 2] = [None, None];
    let mut carriers: [Option<QubitRef>; 2] = [None, None];
    let mut frame: Option<FrameState> = None;
    let mut next_step: u16 = 1;

    for record in ordered {
        match record.kind {
            RecordKind::Covert => {
                return Err(Error::ProtocolOrder(
                    "covert records cannot appear in an announcement set".into(),
                ));
            }
            RecordKind::Swap => {
                if frame.is_some() {
                    return Err(Error::ProtocolOrder(
                        "swap announced after feeding".into(),
                    ));
                }
                let (q1, q2) = record.qubits;
                if q1.owner != record.actor || q2.owner != record.actor {
                    return Err(Error::ProtocolOrder(format!(
                        "swap by {} measures qubits it does not hold",
                        record.actor
                    )));
                }
                let i = find_live(&pairs, q1)?;
                let j = find_live(&pairs, q2)?;
                if i == j {
                    return Err(Error::ProtocolOrder(format!(
                        "swap by {} measures both halves of one pair",
                        record.actor
                    )));
                }
                let merged = TrackedPair {
                    a: pairs[i].partner_of(q1).expect("found by half"),
                    b: pairs[j].partner_of(q2).expect("found by half"),
                    label: pairs[i].label.xor(pairs[j].label).xor(record.outcome),
                    consumed: false,
                };
                pairs[i].consumed = true;
                pairs[j].consumed = true;
                pairs.push(merged);
            }
            RecordKind::Feed { leg } => {
                if record.actor != Party::Alice {
                    return Err(Error::ProtocolOrder(
                        "feed announcements come from the sender".into(),
                    ));
                }
                if !(1..=2).contains(&leg) {
                    return Err(Error::ProtocolOrder(format!("feed leg {leg} out of range")));
                }
                let slot = leg as usize - 1;
                if channels[slot].is_some() {
                    return Err(Error::ProtocolOrder(format!("feed leg {leg} announced twice")));
                }
                let anchor = record.qubits.1;
                if anchor.owner != Party::Alice {
                    return Err(Error::ProtocolOrder(
                        "feed must consume one of the sender's pair halves".into(),
                    ));
                }
                let i = find_live(&pairs, anchor)?;
                channels[slot] = Some((pairs[i].label, record.outcome));
                carriers[slot] = Some(pairs[i].partner_of(anchor).expect("found by half"));
                pairs[i].consumed = true;
            }
            RecordKind::Pass { step } => {
                if frame.is_none() {
                    match (channels[0], channels[1]) {
                        (Some(leg1), Some(leg2)) => {
                            frame = Some(FrameState::after_feed_via(chain_len, leg1, leg2)?);
                        }
                        _ => {
                            return Err(Error::ProtocolOrder(
                                "pass announced before both feed legs".into(),
                            ));
                        }
                    }
                }
                if step != next_step {
                    return Err(Error::ProtocolOrder(format!(
                        "pass step {step} announced, expected step {next_step}"
                    )));
                }
                next_step += 1;
                let (claimed_carrier, half) = record.qubits;
                let mover = if carriers[0] == Some(claimed_carrier) {
                    PayloadSlot::First
                } else if carriers[1] == Some(claimed_carrier) {
                    PayloadSlot::Second
                } else {
                    return Err(Error::ProtocolOrder(format!(
                        "pass step {step} measures {claimed_carrier}, which carries no share"
                    )));
                };
                if claimed_carrier.owner != record.actor || half.owner != record.actor {
                    return Err(Error::ProtocolOrder(format!(
                        "pass step {step} by {} measures qubits it does not hold",
                        record.actor
                    )));
                }
                let i = find_live(&pairs, half)?;
                let landing = pairs[i].partner_of(half).expect("found by half");
                frame
                    .as_mut()
                    .expect("initialized above")
                    .pass_via(mover, pairs[i].label, record.outcome)?;
                pairs[i].consumed = true;
                carriers[mover as usize] = Some(landing);
            }
        }
    }

    let frame = match frame {
        Some(f) => f,
        None => match (channels[0], channels[1]) {
            (Some(leg1), Some(leg2)) => FrameState::after_feed_via(chain_len, leg1, leg2)?,
            _ => {
                return Err(Error::IncompleteTranscript {
                    missing: channels.iter().filter(|c| c.is_none()).count(),
                })
            }
        },
    };
    let word = frame.retrieval_word()?;
    let (c1, c2) = (
        carriers[0].expect("set with the feed"),
        carriers[1].expect("set with the feed"),
    );
    if c1.owner != c2.owner {
        return Err(Error::ProtocolOrder(format!(
            "announced passes leave the shares split between {} and {}",
            c1.owner, c2.owner
        )));
    }
    Ok(ReplayOutcome {
        word,
        receiver: c1.owner,
        carriers: (c1, c2),
    })
}
