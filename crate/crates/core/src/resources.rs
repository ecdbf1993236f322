//! Resource accounting: predicted ledgers, measured ledgers, and the audit
//! that reconciles a run report against the prediction.
//!
//! The headline formulas for sharing a two-qubit state among N members:
//!
//! * this scheme: N+1 Bell pairs, 0 GHZ measurements, 4 sender bits,
//!   2(N-1) controller bits;
//! * the GHZ baseline it is compared against: 2N Bell pairs, 2 GHZ
//!   measurements, 2(N+1) sender bits, 2(N-1) controller bits.
//!
//! Announced entanglement swaps (receiver changes, chain contractions) are
//! counted separately from the fixed-receiver ledger, as are any pairs or
//! measurements injected by an adversary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{EventKind, EventRecord, MeasurementRecord, RecordKind, RunReport};

/// Pair origin code carried in `PairPrepared` event bits after the label.
pub const PAIR_ORIGIN_PROTOCOL: u8 = 0;
/// Origin code of a pair injected outside the distributed topology.
pub const PAIR_ORIGIN_PRIVATE: u8 = 1;

/// Which resource model a ledger row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Bell pairs and Bell measurements only (this implementation).
    BellChain,
    /// The GHZ-based alternative used as the comparison baseline.
    GhzBaseline,
}

/// Consumable counts for one complete delivery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLedger {
    pub scheme: Scheme,
    pub parties: u16,
    pub bell_pairs: u32,
    pub ghz_measurements: u32,
    pub alice_bits: u32,
    pub controller_bits: u32,
}

/// Predicted ledger for a default run (delivery to the last member).
pub fn ledger_formula(scheme: Scheme, parties: u16) -> Result<ResourceLedger> {
    if parties < 2 {
        return Err(Error::Config(format!(
            "resource formulas need at least 2 members, got {parties}"
        )));
    }
    let n = parties as u32;
    Ok(match scheme {
        Scheme::BellChain => ResourceLedger {
            scheme,
            parties,
            bell_pairs: n + 1,
            ghz_measurements: 0,
            alice_bits: 4,
            controller_bits: 2 * (n - 1),
        },
        Scheme::GhzBaseline => ResourceLedger {
            scheme,
            parties,
            bell_pairs: 2 * n,
            ghz_measurements: 2,
            alice_bits: 2 * (n + 1),
            controller_bits: 2 * (n - 1),
        },
    })
}

/// Ledger actually consumed by a transcript: counts announced bits and
/// protocol-distributed pairs only.
pub fn measured_ledger(
    parties: u16,
    transcript: &[MeasurementRecord],
    events: &[EventRecord],
) -> ResourceLedger {
    let mut bell_pairs = 0u32;
    for e in events {
        if e.kind == EventKind::PairPrepared
            && e.bits.get(2).copied().unwrap_or(PAIR_ORIGIN_PROTOCOL) == PAIR_ORIGIN_PROTOCOL
        {
            bell_pairs += 1;
        }
    }
    let mut alice_bits = 0u32;
    let mut controller_bits = 0u32;
    for r in transcript {
        if !r.announced {
            continue;
        }
        match r.kind {
            RecordKind::Feed { .. } => alice_bits += 2,
            RecordKind::Pass { .. } => controller_bits += 2,
            RecordKind::Swap | RecordKind::Covert => {}
        }
    }
    ResourceLedger {
        scheme: Scheme::BellChain,
        parties,
        bell_pairs,
        ghz_measurements: 0,
        alice_bits,
        controller_bits,
    }
}

/// Result of reconciling a run report against the predictions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditOutcome {
    pub measured: ResourceLedger,
    pub expected: ResourceLedger,
    /// Announced swap measurements (receiver changes, contractions) and the
    /// bits they broadcast; tracked beside the fixed-receiver ledger.
    pub swap_measurements: u32,
    pub swap_bits: u32,
    pub expected_swap_measurements: u32,
    /// Pairs whose origin is not the protocol distribution step.
    pub extra_bell_pairs: u32,
    /// Measurements present in the transcript but never announced.
    pub covert_measurements: u32,
    pub discrepancies: Vec<String>,
    pub matches: bool,
}

/// Reconciles a report: the expected ledger adjusts controller bits to the
/// report's receiver (earlier receivers trade pass announcements for swap
/// announcements) and every remaining difference is flagged.
pub fn audit(report: &RunReport) -> Result<AuditOutcome> {
    let parties = report.parties;
    if report.receiver < 1 || report.receiver > parties {
        return Err(Error::Config(format!(
            "report names receiver {} of {} members",
            report.receiver, parties
        )));
    }
    let mut expected = ledger_formula(Scheme::BellChain, parties)?;
    expected.controller_bits = 2 * (u32::from(report.receiver) - 1);
    let expected_swaps = u32::from(parties - report.receiver);

    let measured = measured_ledger(parties, &report.transcript, &report.events);
    let mut swap_measurements = 0u32;
    let mut swap_bits = 0u32;
    let mut covert_measurements = 0u32;
    let mut extra_bell_pairs = 0u32;
    for r in &report.transcript {
        match r.kind {
            RecordKind::Swap => {
                swap_measurements += 1;
                if r.announced {
                    swap_bits += 2;
                }
            }
            RecordKind::Covert => covert_measurements += 1,
            _ => {}
        }
    }
    for e in &report.events {
        if e.kind == EventKind::PairPrepared
            && e.bits.get(2).copied().unwrap_or(PAIR_ORIGIN_PROTOCOL) != PAIR_ORIGIN_PROTOCOL
        {
            extra_bell_pairs += 1;
        }
    }

    let mut discrepancies = Vec::new();
    let pairs = [
        ("bell_pairs", measured.bell_pairs, expected.bell_pairs),
        (
            "ghz_measurements",
            measured.ghz_measurements,
            expected.ghz_measurements,
        ),
        ("alice_bits", measured.alice_bits, expected.alice_bits),
        (
            "controller_bits",
            measured.controller_bits,
            expected.controller_bits,
        ),
    ];
    for (name, got, want) in pairs {
        if got != want {
            discrepancies.push(format!("{name}: measured {got}, expected {want}"));
        }
    }
    if swap_measurements != expected_swaps {
        discrepancies.push(format!(
            "swap_measurements: measured {swap_measurements}, expected {expected_swaps}"
        ));
    }
    if extra_bell_pairs > 0 {
        discrepancies.push(format!(
            "extra_bell_pairs: +{extra_bell_pairs} outside the distributed topology"
        ));
    }
    if covert_measurements > 0 {
        discrepancies.push(format!(
            "covert_measurements: {covert_measurements} never announced"
        ));
    }
    let matches = discrepancies.is_empty();
    Ok(AuditOutcome {
        measured,
        expected,
        swap_measurements,
        swap_bits,
        expected_swap_measurements: expected_swaps,
        extra_bell_pairs,
        covert_measurements,
        discrepancies,
        matches,
    })
}

/// Side-by-side ledger predictions for one party count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ComparisonRow {
    pub parties: u16,
    pub bell_chain: ResourceLedger,
    pub ghz_baseline: ResourceLedger,
}

pub fn comparison_rows(party_counts: &[u16]) -> Result<Vec<ComparisonRow>> {
    party_counts
        .iter()
        .map(|&n| {
            Ok(ComparisonRow {
                parties: n,
                bell_chain: ledger_formula(Scheme::BellChain, n)?,
                ghz_baseline: ledger_formula(Scheme::GhzBaseline, n)?,
            })
        })
        .collect()
}

/// Fixed-width text table of the scheme comparison.
pub fn comparison_table(party_counts: &[u16]) -> Result<String> {
    let rows = comparison_rows(party_counts)?;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:<13} {:>10} {:>17} {:>11} {:>16}\n",
        "parties", "scheme", "bell_pairs", "ghz_measurements", "alice_bits", "controller_bits"
    ));
    for row in rows {
        for ledger in [row.bell_chain, row.ghz_baseline] {
            let scheme = match ledger.scheme {
                Scheme::BellChain => "bell_chain",
                Scheme::GhzBaseline => "ghz_baseline",
            };
            out.push_str(&format!(
                "{:<8} {:<13} {:>10} {:>17} {:>11} {:>16}\n",
                row.parties,
                scheme,
                ledger.bell_pairs,
                ledger.ghz_measurements,
                ledger.alice_bits,
                ledger.controller_bits
            ));
        }
    }
    Ok(out)
}

/// CSV rendering of the scheme comparison, one line per (parties, scheme).
pub fn comparison_csv(party_counts: &[u16]) -> Result<String> {
    let rows = comparison_rows(party_counts)?;
    let mut out =
        String::from("parties,scheme,bell_pairs,ghz_measurements,alice_bits,controller_bits\n");
    for row in rows {
        for ledger in [row.bell_chain, row.ghz_baseline] {
            let scheme = match ledger.scheme {
                Scheme::BellChain => "bell_chain",
                Scheme::GhzBaseline => "ghz_baseline",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.parties,
                scheme,
                ledger.bell_pairs,
                ledger.ghz_measurements,
                ledger.alice_bits,
                ledger.controller_bits
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{BellLabel, Party, QubitRef};

    #[test]
    fn formulas_match_the_fixed_points() {
        let bc = ledger_formula(Scheme::BellChain, 3).unwrap();
        assert_eq!(
            (bc.bell_pairs, bc.ghz_measurements, bc.alice_bits, bc.controller_bits),
            (4, 0, 4, 4)
        );
        let gb = ledger_formula(Scheme::GhzBaseline, 3).unwrap();
        assert_eq!(
            (gb.bell_pairs, gb.ghz_measurements, gb.alice_bits, gb.controller_bits),
            (6, 2, 8, 4)
        );
        let bc10 = ledger_formula(Scheme::BellChain, 10).unwrap();
        assert_eq!(bc10.bell_pairs, 11);
        assert_eq!(bc10.controller_bits, 18);
        assert!(ledger_formula(Scheme::BellChain, 1).is_err());
    }

    #[test]
    fn measured_ledger_counts_only_announced_protocol_traffic() {
        let q = |k: u16, s: u8| QubitRef::new(Party::Member(k), s);
        let transcript = vec![
            MeasurementRecord {
                sequence: 0,
                actor: Party::Alice,
                kind: RecordKind::Feed { leg: 1 },
                qubits: (QubitRef::new(Party::Alice, 0), QubitRef::new(Party::Alice, 2)),
                outcome: BellLabel::new(0, 0),
                announced: true,
            },
            MeasurementRecord {
                sequence: 1,
                actor: Party::Member(1),
                kind: RecordKind::Pass { step: 1 },
                qubits: (q(1, 0), q(1, 1)),
                outcome: BellLabel::new(1, 1),
                announced: true,
            },
            MeasurementRecord {
                sequence: 2,
                actor: Party::Member(2),
                kind: RecordKind::Covert,
                qubits: (q(2, 0), q(2, 4)),
                outcome: BellLabel::new(0, 1),
                announced: false,
            },
        ];
        let events = vec![
            EventRecord {
                time: 0,
                kind: EventKind::PairPrepared,
                sender: "A".into(),
                bits: vec![0, 0, PAIR_ORIGIN_PROTOCOL],
            },
            EventRecord {
                time: 1,
                kind: EventKind::PairPrepared,
                sender: "B2".into(),
                bits: vec![0, 0, PAIR_ORIGIN_PRIVATE],
            },
        ];
        let measured = measured_ledger(3, &transcript, &events);
        assert_eq!(measured.bell_pairs, 1);
        assert_eq!(measured.alice_bits, 2);
        assert_eq!(measured.controller_bits, 2);
        assert_eq!(measured.ghz_measurements, 0);
    }

    #[test]
    fn comparison_renderers_cover_both_schemes() {
        let table = comparison_table(&[3]).unwrap();
        assert!(table.contains("bell_chain"));
        assert!(table.contains("ghz_baseline"));
        let csv = comparison_csv(&[2, 3]).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("2,bell_chain,3,0,4,2"));
        assert!(csv.lines().nth(4).unwrap().starts_with("3,ghz_baseline,6,2,8,4"));
    }
}
