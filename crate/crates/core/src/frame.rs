//! Classical Pauli-frame tracking.
//!
//! The simulator never applies mid-protocol corrections to the dense state.
//! Instead every measurement folds into a two-slot Pauli word (exponents of
//! Z and X per payload slot, all mod 2), and the receiver applies the
//! accumulated word once at retrieval. The two payload slots are logical:
//! slot 1 is the share fed through the first feed pair, slot 2 the share fed
//! through the second. Because carriers alternate down the chain, pass step
//! k on the default chain moves slot 1 when k is odd and slot 2 when k is
//! even; sessions that rewire the chain report the mover explicitly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::{BellLabel, QubitRef, StateVector};

/// Which logical payload share an operation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadSlot {
    First,
    Second,
}

impl fmt::Display for PayloadSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadSlot::First => write!(f, "slot1"),
            PayloadSlot::Second => write!(f, "slot2"),
        }
    }
}

/// A two-qubit Pauli word `Z^z1 X^x1 (x) Z^z2 X^x2`, exponents mod 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliWord2 {
    pub z1: u8,
    pub x1: u8,
    pub z2: u8,
    pub x2: u8,
}

/// Folds one Bell channel label and one measurement outcome into the (z, x)
/// exponent pair they imprint on the transported share.
pub fn fold(channel: BellLabel, outcome: BellLabel) -> (u8, u8) {
    (channel.mu ^ outcome.mu, channel.nu ^ outcome.nu)
}

impl PauliWord2 {
    pub const IDENTITY: PauliWord2 = PauliWord2 {
        z1: 0,
        x1: 0,
        z2: 0,
        x2: 0,
    };

    pub fn from_slots(first: (u8, u8), second: (u8, u8)) -> Self {
        PauliWord2 {
            z1: first.0 & 1,
            x1: first.1 & 1,
            z2: second.0 & 1,
            x2: second.1 & 1,
        }
    }

    pub fn slot(&self, slot: PayloadSlot) -> (u8, u8) {
        match slot {
            PayloadSlot::First => (self.z1, self.x1),
            PayloadSlot::Second => (self.z2, self.x2),
        }
    }

    /// XORs `(z, x)` into one slot; exponent arithmetic is mod 2, so
    /// composition ignores operator order up to global phase.
    pub fn xor_slot(&mut self, slot: PayloadSlot, z: u8, x: u8) {
        match slot {
            PayloadSlot::First => {
                self.z1 ^= z & 1;
                self.x1 ^= x & 1;
            }
            PayloadSlot::Second => {
                self.z2 ^= z & 1;
                self.x2 ^= x & 1;
            }
        }
    }

    pub fn composed(mut self, other: PauliWord2) -> PauliWord2 {
        self.z1 ^= other.z1;
        self.x1 ^= other.x1;
        self.z2 ^= other.z2;
        self.x2 ^= other.x2;
        self
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Applies the word to two carrier qubits of a dense register
    /// (slot 1 word on `carriers.0`, slot 2 word on `carriers.1`).
    pub fn apply_to(
        &self,
        state: &mut StateVector,
        carriers: (QubitRef, QubitRef),
    ) -> Result<()> {
        state.apply_pauli(carriers.0, self.z1, self.x1)?;
        state.apply_pauli(carriers.1, self.z2, self.x2)
    }

    /// Applies the word in place to a bare two-qubit amplitude block
    /// (slot 1 in the low bit).
    pub fn apply_to_amps(&self, amps: &mut [num_complex::Complex64; 4]) {
        for (bit, z, x) in [(0usize, self.z1, self.x1), (1, self.z2, self.x2)] {
            if x == 1 {
                amps.swap(0, 1 << bit);
                amps.swap(3 ^ (1 << bit), 3);
            }
            if z == 1 {
                for (i, a) in amps.iter_mut().enumerate() {
                    if (i >> bit) & 1 == 1 {
                        *a = -*a;
                    }
                }
            }
        }
    }

    /// All sixteen two-qubit words in a fixed enumeration order.
    pub fn enumerate_all() -> [PauliWord2; 16] {
        let mut out = [PauliWord2::IDENTITY; 16];
        for (i, w) in out.iter_mut().enumerate() {
            *w = PauliWord2 {
                z1: (i & 1) as u8,
                x1: ((i >> 1) & 1) as u8,
                z2: ((i >> 2) & 1) as u8,
                x2: ((i >> 3) & 1) as u8,
            };
        }
        out
    }
}

impl fmt::Display for PauliWord2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn side(z: u8, x: u8) -> &'static str {
            match (z, x) {
                (0, 0) => "I",
                (0, 1) => "X",
                (1, 0) => "Z",
                _ => "ZX",
            }
        }
        write!(f, "{}(x){}", side(self.z1, self.x1), side(self.z2, self.x2))
    }
}

/// Frame bookkeeping for one delivery: chain length, progress, and the
/// accumulated correction word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameState {
    chain_len: u16,
    step_index: u16,
    word: PauliWord2,
}

impl FrameState {
    /// Frame immediately after the two feeding measurements over explicit
    /// channel labels. `chain_len` is the number of chain members the
    /// shares must traverse (1 means both feed pairs already end at the
    /// receiver).
    pub fn after_feed_via(
        chain_len: u16,
        first: (BellLabel, BellLabel),
        second: (BellLabel, BellLabel),
    ) -> Result<Self> {
        if chain_len == 0 {
            return Err(Error::Config("chain length must be at least 1".into()));
        }
        let (z1, x1) = fold(first.0, first.1);
        let (z2, x2) = fold(second.0, second.1);
        Ok(FrameState {
            chain_len,
            step_index: 0,
            word: PauliWord2::from_slots((z1, x1), (z2, x2)),
        })
    }

    /// Feed over pristine channels: the slot words are the raw outcomes.
    pub fn after_feed(chain_len: u16, first: BellLabel, second: BellLabel) -> Result<Self> {
        Self::after_feed_via(
            chain_len,
            (BellLabel::default(), first),
            (BellLabel::default(), second),
        )
    }

    /// The share a default-chain pass step moves: step 1 moves slot 1 and
    /// the steps alternate from there.
    pub fn default_mover(step: u16) -> PayloadSlot {
        if step % 2 == 1 {
            PayloadSlot::First
        } else {
            PayloadSlot::Second
        }
    }

    /// Mover of every pass step on a default chain of `chain_len` members.
    pub fn mover_table(chain_len: u16) -> Vec<PayloadSlot> {
        (1..chain_len).map(Self::default_mover).collect()
    }

    /// Folds one pass measurement over an explicit channel label into the
    /// given payload slot.
    pub fn pass_via(
        &mut self,
        mover: PayloadSlot,
        channel: BellLabel,
        outcome: BellLabel,
    ) -> Result<u16> {
        if self.delivered() {
            return Err(Error::ProtocolOrder(
                "pass recorded after delivery".into(),
            ));
        }
        let (z, x) = fold(channel, outcome);
        self.word.xor_slot(mover, z, x);
        self.step_index += 1;
        Ok(self.step_index)
    }

    /// Default-chain pass: pristine channel, mover chosen by step parity.
    pub fn pass(&mut self, outcome: BellLabel) -> Result<u16> {
        let mover = Self::default_mover(self.step_index + 1);
        self.pass_via(mover, BellLabel::default(), outcome)
    }

    /// XORs a correction directly onto a slot (used for covert operations
    /// that never appear as protocol passes).
    pub fn compose_on_slot(&mut self, slot: PayloadSlot, z: u8, x: u8) {
        self.word.xor_slot(slot, z, x);
    }

    pub fn chain_len(&self) -> u16 {
        self.chain_len
    }

    pub fn steps_taken(&self) -> u16 {
        self.step_index
    }

    /// True once every pass step of the chain has been folded in.
    pub fn delivered(&self) -> bool {
        self.step_index + 1 >= self.chain_len
    }

    /// Current accumulated word, regardless of progress.
    pub fn word(&self) -> PauliWord2 {
        self.word
    }

    /// The correction the receiver must apply; only defined once delivered.
    pub fn retrieval_word(&self) -> Result<PauliWord2> {
        if !self.delivered() {
            return Err(Error::ProtocolOrder(format!(
                "retrieval requested after {} of {} pass steps",
                self.step_index,
                self.chain_len - 1
            )));
        }
        Ok(self.word)
    }
}
