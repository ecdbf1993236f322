//! Dense quantum substrate: addressable qubits, Bell-pair kernels, and the
//! density-matrix tools the verification suites need.
//!
//! Conventions, fixed here and relied on everywhere else:
//!
//! * A register is an ordered list of addressable qubits. The qubit at
//!   register position `i` owns bit `i` of each basis index, so the first
//!   qubit varies fastest.
//! * The Bell state labelled `(mu, nu)` is
//!   `(|0, nu> + (-1)^mu |1, 1 xor nu>) / sqrt(2)`: `mu` picks the relative
//!   sign, `nu` the parity between the two qubits.
//! * Global phase carries no information. Correctness checks compare states
//!   through fidelity or trace distance, never through raw amplitudes.

mod density;
mod state;

pub use density::{DensityMatrix, MixtureAccumulator};
pub use state::{bell_amplitudes, StateVector, MAX_QUBITS};

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Numerical tolerance for "this amplitude mass should be zero" checks on
/// preconditions (e.g. preparing a pair on non-fresh qubits).
pub const PRECONDITION_TOLERANCE: f64 = 1e-12;

/// Residual weight above which retirement of a qubit subset is rejected as
/// still entangled.
pub const RETIREMENT_TOLERANCE: f64 = 1e-10;

/// Probability below which a forced branch counts as impossible.
pub const ZERO_BRANCH_TOLERANCE: f64 = 1e-13;

/// A protocol participant. `Member(k)` is the k-th controller, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Alice,
    Member(u16),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Alice => write!(f, "A"),
            Party::Member(k) => write!(f, "B{k}"),
        }
    }
}

impl FromStr for Party {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "A" {
            return Ok(Party::Alice);
        }
        if let Some(rest) = s.strip_prefix('B') {
            if let Ok(k) = rest.parse::<u16>() {
                if k >= 1 {
                    return Ok(Party::Member(k));
                }
            }
        }
        Err(Error::Config(format!("unparseable party name {s:?}")))
    }
}

impl Serialize for Party {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Party {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// A stable address for one qubit: which party holds it and in which of that
/// party's local slots it sits. Addresses survive register compaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QubitRef {
    pub owner: Party,
    pub slot: u8,
}

impl QubitRef {
    pub const fn new(owner: Party, slot: u8) -> Self {
        QubitRef { owner, slot }
    }
}

impl fmt::Display for QubitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.slot)
    }
}

impl FromStr for QubitRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (owner, slot) = s
            .rsplit_once('.')
            .ok_or_else(|| Error::Config(format!("unparseable qubit address {s:?}")))?;
        let owner = owner.parse()?;
        let slot = slot
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("unparseable qubit slot in {s:?}")))?;
        Ok(QubitRef { owner, slot })
    }
}

impl Serialize for QubitRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QubitRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Label of a Bell state or of a Bell-measurement outcome. Both components
/// are bits; the canonical enumeration order is
/// `(0,0), (0,1), (1,0), (1,1)`, i.e. `index = 2*mu + nu`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BellLabel {
    pub mu: u8,
    pub nu: u8,
}

impl BellLabel {
    /// Builds a label, reducing both components mod 2.
    pub const fn new(mu: u8, nu: u8) -> Self {
        BellLabel {
            mu: mu & 1,
            nu: nu & 1,
        }
    }

    /// Position of this label in the canonical enumeration order.
    pub const fn index(self) -> usize {
        (self.mu as usize) * 2 + self.nu as usize
    }

    /// Inverse of [`BellLabel::index`].
    pub const fn from_index(index: usize) -> Self {
        BellLabel {
            mu: ((index >> 1) & 1) as u8,
            nu: (index & 1) as u8,
        }
    }

    /// All four labels in canonical order.
    pub const ALL: [BellLabel; 4] = [
        BellLabel { mu: 0, nu: 0 },
        BellLabel { mu: 0, nu: 1 },
        BellLabel { mu: 1, nu: 0 },
        BellLabel { mu: 1, nu: 1 },
    ];

    /// Componentwise XOR; Bell labels form a group under this operation and
    /// entanglement swapping composes labels with it.
    pub const fn xor(self, other: BellLabel) -> BellLabel {
        BellLabel {
            mu: self.mu ^ other.mu,
            nu: self.nu ^ other.nu,
        }
    }

    pub const fn is_zero(self) -> bool {
        self.mu == 0 && self.nu == 0
    }
}

impl fmt::Display for BellLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.mu, self.nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn party_names_round_trip() {
        for p in [Party::Alice, Party::Member(1), Party::Member(64)] {
            let s = p.to_string();
            assert_eq!(s.parse::<Party>().unwrap(), p);
        }
        assert!("B0".parse::<Party>().is_err());
        assert!("C3".parse::<Party>().is_err());
        assert!("".parse::<Party>().is_err());
    }

    #[test]
    fn qubit_addresses_round_trip() {
        for q in [
            QubitRef::new(Party::Alice, 0),
            QubitRef::new(Party::Member(12), 3),
        ] {
            assert_eq!(q.to_string().parse::<QubitRef>().unwrap(), q);
        }
        assert!("A".parse::<QubitRef>().is_err());
        assert!("B2.x".parse::<QubitRef>().is_err());
    }

    #[test]
    fn bell_label_index_is_canonical() {
        for (i, label) in BellLabel::ALL.iter().enumerate() {
            assert_eq!(label.index(), i);
            assert_eq!(BellLabel::from_index(i), *label);
        }
        assert_eq!(
            BellLabel::new(1, 0).xor(BellLabel::new(1, 1)),
            BellLabel::new(0, 1)
        );
    }
}
