//! The protocol engine: session state, feeding, chain passing, receiver
//! changes, retrieval, and exhaustive branch enumeration.
//!
//! A session owns the dense register, the pair topology, the seeded RNG,
//! the Pauli frame, and the classical transcript. Mid-protocol corrections
//! are never applied to amplitudes; the frame (and, independently, a
//! classical replay of the announced records) determines the single
//! correction word the receiver applies at retrieval.

mod replay;
mod topology;

pub use replay::{replay_retrieval, ReplayOutcome};
pub use topology::{feed_slot, BellPair, ContractionPlan, PairOrigin, PairStatus, Topology};

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameState, PauliWord2, PayloadSlot};
use crate::quantum::{bell_amplitudes, BellLabel, Party, QubitRef, StateVector};
use crate::report::{
    DisclosurePolicy, Driver, EventKind, EventRecord, MeasurementRecord, RecordKind, RunReport,
    REPORT_SCHEMA_VERSION,
};
use crate::resources::{measured_ledger, PAIR_ORIGIN_PRIVATE, PAIR_ORIGIN_PROTOCOL};

/// Largest supported member count.
pub const MAX_PARTIES: u16 = 64;

/// Auto materialization keeps the whole register dense up to this width.
pub const UPFRONT_QUBIT_LIMIT: usize = 16;

/// A run counts as an exact delivery when its fidelity clears this bound.
pub const FIDELITY_EXIT_THRESHOLD: f64 = 1.0 - 1e-8;

/// An arbitrary (not necessarily product) state of the two payload qubits.
///
/// Coefficients are indexed `K[i][j]` for basis `|i, j>`; internally the
/// amplitudes follow the register convention (first payload qubit in the
/// low bit).
#[derive(Clone, Debug, PartialEq)]
pub struct TwoQubitState {
    amps: [Complex64; 4],
}

impl TwoQubitState {
    /// Builds from row-major coefficients `[K00, K01, K10, K11]`, which
    /// must already be normalized to 1e-9.
    pub fn from_coefficients(k: [Complex64; 4]) -> Result<Self> {
        let norm: f64 = k.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "payload coefficients have squared norm {norm}, expected 1"
            )));
        }
        Ok(Self::scaled(k, norm.sqrt()))
    }

    /// Builds from unnormalized coefficients, rescaling to unit norm.
    pub fn from_coefficients_normalized(k: [Complex64; 4]) -> Result<Self> {
        let norm: f64 = k.iter().map(|a| a.norm_sqr()).sum();
        if norm < 1e-12 {
            return Err(Error::Config(
                "payload coefficients are numerically zero".into(),
            ));
        }
        Ok(Self::scaled(k, norm.sqrt()))
    }

    fn scaled(k: [Complex64; 4], norm: f64) -> Self {
        let s = 1.0 / norm;
        TwoQubitState {
            amps: [k[0] * s, k[2] * s, k[1] * s, k[3] * s],
        }
    }

    /// The computational basis state `|i, j>`.
    pub fn basis(i: u8, j: u8) -> Self {
        let mut k = [Complex64::ZERO; 4];
        k[(2 * (i & 1) + (j & 1)) as usize] = Complex64::ONE;
        TwoQubitState {
            amps: [k[0], k[2], k[1], k[3]],
        }
    }

    /// The Bell state with the given label.
    pub fn bell(label: BellLabel) -> Self {
        TwoQubitState {
            amps: bell_amplitudes(label),
        }
    }

    /// A Haar-like random pure state drawn from `rng` (independent complex
    /// Gaussian coefficients, normalized).
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut gauss = || {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            Complex64::new(
                r * (std::f64::consts::TAU * u2).cos(),
                r * (std::f64::consts::TAU * u2).sin(),
            )
        };
        let k = [gauss(), gauss(), gauss(), gauss()];
        Self::from_coefficients_normalized(k).expect("gaussian draw is nonzero")
    }

    /// Row-major coefficients `[K00, K01, K10, K11]`.
    pub fn coefficients(&self) -> [Complex64; 4] {
        [self.amps[0], self.amps[2], self.amps[1], self.amps[3]]
    }

    /// Amplitudes in register order (first payload qubit in the low bit).
    pub fn register_amplitudes(&self) -> [Complex64; 4] {
        self.amps
    }

    /// Fidelity against another two-qubit pure state.
    pub fn fidelity_with(&self, other: &TwoQubitState) -> f64 {
        let overlap: Complex64 = self
            .amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| b.conj() * a)
            .sum();
        overlap.norm_sqr()
    }
}

/// When Bell pairs are tensored into the dense register.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Materialization {
    /// Upfront while the register fits [`UPFRONT_QUBIT_LIMIT`], lazy above.
    #[default]
    Auto,
    /// All pairs dense from the start (bounded by the register cap).
    Upfront,
    /// Pairs enter the register just before their first measurement.
    Lazy,
}

/// Full description of one run.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub parties: u16,
    pub receiver: u16,
    pub seed: u64,
    pub payload: TwoQubitState,
    pub policy: DisclosurePolicy,
    pub materialization: Materialization,
    /// Interior members contracted out of the chain before feeding
    /// (diagnostic sweeps); must all lie strictly below the receiver.
    pub exclusions: Vec<u16>,
    /// Forces every protocol measurement outcome, in measurement order:
    /// contractions (directive order), the two feeds, then each pass.
    pub forced_outcomes: Option<Vec<BellLabel>>,
    /// Cross-check invariants (post-measurement pair states, branch
    /// uniformity, frame/replay agreement) while running.
    pub verify_invariants: bool,
}

impl ProtocolConfig {
    pub fn new(parties: u16, seed: u64) -> Self {
        ProtocolConfig {
            parties,
            receiver: parties,
            seed,
            payload: TwoQubitState::basis(0, 0),
            policy: DisclosurePolicy::default(),
            materialization: Materialization::default(),
            exclusions: Vec::new(),
            forced_outcomes: None,
            verify_invariants: true,
        }
    }

    /// Contractions the directive orders: excluded members ascending, then
    /// the tail above the receiver, descending.
    pub fn contraction_order(&self) -> Vec<u16> {
        let mut order = self.exclusions.clone();
        order.sort_unstable();
        let mut t = self.parties;
        while t > self.receiver {
            order.push(t);
            t -= 1;
        }
        order
    }

    /// Members remaining on the chain after the directive, ascending.
    pub fn chain_members(&self) -> Vec<u16> {
        (1..=self.receiver)
            .filter(|m| !self.exclusions.contains(m))
            .collect()
    }

    /// Number of measurements a complete honest run announces.
    pub fn expected_measurements(&self) -> usize {
        self.contraction_order().len() + 2 + (self.chain_members().len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parties < 2 || self.parties > MAX_PARTIES {
            return Err(Error::Config(format!(
                "party count {} outside 2..={MAX_PARTIES}",
                self.parties
            )));
        }
        if self.receiver < 1 || self.receiver > self.parties {
            return Err(Error::Config(format!(
                "receiver B{} outside 1..={}",
                self.receiver, self.parties
            )));
        }
        let mut seen = Vec::new();
        for &m in &self.exclusions {
            if m < 1 || m >= self.receiver {
                return Err(Error::Config(format!(
                    "excluded member B{m} must lie strictly below the receiver B{}",
                    self.receiver
                )));
            }
            if seen.contains(&m) {
                return Err(Error::Config(format!("member B{m} excluded twice")));
            }
            seen.push(m);
        }
        if self.chain_members().is_empty() {
            return Err(Error::Config("no members left on the chain".into()));
        }
        if let Some(forced) = &self.forced_outcomes {
            let expected = self.expected_measurements();
            if forced.len() != expected {
                return Err(Error::Config(format!(
                    "{} forced outcomes supplied, this run performs {expected} measurements",
                    forced.len()
                )));
            }
        }
        Ok(())
    }

    fn upfront(&self) -> bool {
        match self.materialization {
            Materialization::Upfront => true,
            Materialization::Lazy => false,
            Materialization::Auto => {
                2 + 2 * (self.parties as usize + 1) <= UPFRONT_QUBIT_LIMIT
            }
        }
    }
}

/// Protocol progress marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Fed,
    Delivered,
    Retrieved,
}

/// What retrieval produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RetrievalOutcome {
    /// Correction word derived from the announced records.
    pub word: PauliWord2,
    /// Fidelity of the corrected carrier pair against the fed payload.
    pub fidelity: f64,
    /// Whether the carrier pair factored out as a pure state.
    pub pure: bool,
}

/// One protocol run in progress.
#[derive(Debug)]
pub struct Session {
    config: ProtocolConfig,
    topology: Topology,
    state: StateVector,
    rng: ChaCha8Rng,
    phase: Phase,
    directive_applied: bool,
    directive: Vec<u16>,
    chain_members: Vec<u16>,
    frame: Option<FrameState>,
    /// Physical carrier qubits per payload slot.
    carriers: Option<(QubitRef, QubitRef)>,
    /// Addresses written into pass records; diverge from the physical
    /// carriers only while an adversary substitutes qubits covertly.
    aliases: Option<(QubitRef, QubitRef)>,
    transcript: Vec<MeasurementRecord>,
    events: Vec<EventRecord>,
    clock: u64,
    branch_probability: f64,
    forced: VecDeque<BellLabel>,
    retrieval: Option<RetrievalOutcome>,
}

impl Session {
    /// Validates the configuration, builds the layout, and prepares the
    /// payload register (plus every pair when materializing upfront).
    pub fn start(config: ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let topology = Topology::build(config.parties)?;
        let payload_qubits = vec![
            QubitRef::new(Party::Alice, 0),
            QubitRef::new(Party::Alice, 1),
        ];
        let state = StateVector::with_qubits(
            payload_qubits,
            config.payload.register_amplitudes().to_vec(),
        )?;
        let forced = config
            .forced_outcomes
            .clone()
            .map(VecDeque::from)
            .unwrap_or_default();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let chain_members = (1..=config.parties).collect();
        let mut session = Session {
            topology,
            state,
            rng,
            phase: Phase::Setup,
            directive_applied: false,
            directive: config.contraction_order(),
            chain_members,
            frame: None,
            carriers: None,
            aliases: None,
            transcript: Vec::new(),
            events: Vec::new(),
            clock: 0,
            branch_probability: 1.0,
            forced,
            retrieval: None,
            config,
        };
        let pair_ids: Vec<u32> = session.topology.pairs().iter().map(|p| p.id).collect();
        for id in &pair_ids {
            let pair = *session.topology.pair(*id)?;
            session.push_event(
                EventKind::PairPrepared,
                Party::Alice,
                vec![pair.label.mu, pair.label.nu, PAIR_ORIGIN_PROTOCOL],
            );
        }
        if session.config.upfront() {
            for id in pair_ids {
                session.ensure_live(id)?;
            }
        }
        Ok(session)
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn frame(&self) -> Option<&FrameState> {
        self.frame.as_ref()
    }

    pub fn transcript(&self) -> &[MeasurementRecord] {
        &self.transcript
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn branch_probability(&self) -> f64 {
        self.branch_probability
    }

    pub fn chain_members(&self) -> &[u16] {
        &self.chain_members
    }

    pub fn receiver_party(&self) -> Party {
        Party::Member(self.config.receiver)
    }

    /// Physical carrier qubits, once fed.
    pub fn carriers(&self) -> Option<(QubitRef, QubitRef)> {
        self.carriers
    }

    /// Owners of the two carriers, once fed.
    pub fn holders(&self) -> Option<(Party, Party)> {
        self.carriers.map(|(c1, c2)| (c1.owner, c2.owner))
    }

    pub fn delivered(&self) -> bool {
        matches!(self.phase, Phase::Delivered | Phase::Retrieved)
    }

    pub fn retrieval(&self) -> Option<&RetrievalOutcome> {
        self.retrieval.as_ref()
    }

    pub(crate) fn next_time(&mut self) -> u64 {
        let t = self.clock;
        self.clock += 1;
        t
    }

    pub(crate) fn push_event(&mut self, kind: EventKind, sender: Party, bits: Vec<u8>) {
        let time = self.next_time();
        self.events.push(EventRecord {
            time,
            kind,
            sender: sender.to_string(),
            bits,
        });
    }

    fn ensure_live(&mut self, pair_id: u32) -> Result<()> {
        let pair = *self.topology.pair(pair_id)?;
        match pair.status {
            PairStatus::Live => Ok(()),
            PairStatus::Consumed => Err(Error::Precondition(format!(
                "pair {pair_id} is already consumed"
            ))),
            PairStatus::Pending => {
                self.state
                    .append_state(&[pair.a, pair.b], &bell_amplitudes(pair.label))?;
                self.topology.pair_mut(pair_id)?.status = PairStatus::Live;
                Ok(())
            }
        }
    }

    /// Samples or pops the next protocol measurement outcome and checks
    /// branch uniformity: every honest protocol measurement touches a fresh
    /// pair half, so all four outcomes must occur at 1/4.
    fn next_outcome(&mut self, q1: QubitRef, q2: QubitRef) -> Result<(BellLabel, f64)> {
        let (label, prob) = if let Some(label) = self.forced.pop_front() {
            let p = self.state.bell_measure_forced(q1, q2, label)?;
            (label, p)
        } else {
            self.state.bell_measure(q1, q2, &mut self.rng)?
        };
        if self.config.verify_invariants && (prob - 0.25).abs() > 1e-9 {
            return Err(Error::Numerical(format!(
                "protocol measurement of ({q1}, {q2}) hit branch probability {prob}"
            )));
        }
        self.branch_probability *= prob;
        Ok((label, prob))
    }

    fn check_collapsed_pair(&self, q1: QubitRef, q2: QubitRef, label: BellLabel) -> Result<()> {
        if !self.config.verify_invariants {
            return Ok(());
        }
        let probs = self.state.bell_probabilities(q1, q2)?;
        let f = probs[label.index()];
        if (f - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!(
                "measured pair ({q1}, {q2}) not left in the observed state: fidelity {f}"
            )));
        }
        Ok(())
    }

    fn record(
        &mut self,
        actor: Party,
        kind: RecordKind,
        qubits: (QubitRef, QubitRef),
        outcome: BellLabel,
    ) -> MeasurementRecord {
        let record = MeasurementRecord {
            sequence: self.transcript.len() as u32,
            actor,
            kind,
            qubits,
            outcome,
            announced: false,
        };
        self.push_event(
            EventKind::Measurement,
            actor,
            vec![outcome.mu, outcome.nu],
        );
        self.transcript.push(record.clone());
        record
    }

    /// Broadcasts one recorded outcome: flips the announced flag and logs
    /// the two-bit announcement. Covert records refuse.
    pub fn mark_announced(&mut self, sequence: u32) -> Result<()> {
        let idx = self
            .transcript
            .iter()
            .position(|r| r.sequence == sequence)
            .ok_or_else(|| {
                Error::Precondition(format!("no transcript record with sequence {sequence}"))
            })?;
        if matches!(self.transcript[idx].kind, RecordKind::Covert) {
            return Err(Error::Precondition(
                "covert measurements are never announced".into(),
            ));
        }
        if self.transcript[idx].announced {
            return Ok(());
        }
        self.transcript[idx].announced = true;
        let (actor, outcome) = (self.transcript[idx].actor, self.transcript[idx].outcome);
        self.push_event(EventKind::Announce, actor, vec![outcome.mu, outcome.nu]);
        Ok(())
    }

    /// Deferred-policy batch announcement: the sender's records first, then
    /// member records by member index.
    pub fn finish_announcements(&mut self) -> Result<()> {
        let mut order: Vec<(u16, u32)> = self
            .transcript
            .iter()
            .filter(|r| !matches!(r.kind, RecordKind::Covert) && !r.announced)
            .map(|r| {
                let key = match r.actor {
                    Party::Alice => 0,
                    Party::Member(k) => k,
                };
                (key, r.sequence)
            })
            .collect();
        order.sort_unstable();
        for (_, seq) in order {
            self.mark_announced(seq)?;
        }
        Ok(())
    }

    /// Records announced so far, in sequence order.
    pub fn announced_records(&self) -> Vec<MeasurementRecord> {
        self.transcript
            .iter()
            .filter(|r| r.announced)
            .cloned()
            .collect()
    }

    /// Performs the swap contraction at `party`: the member measures his
    /// two pair halves, merging his pairs into one with the folded label.
    pub fn entanglement_swap(&mut self, party: Party) -> Result<BellLabel> {
        if self.phase != Phase::Setup {
            return Err(Error::ProtocolOrder(
                "swaps must precede the feeding measurements".into(),
            ));
        }
        let plan = self.topology.contraction_plan(party)?;
        self.ensure_live(plan.pair_ids.0)?;
        self.ensure_live(plan.pair_ids.1)?;
        let (outcome, _) = self.next_outcome(plan.measured.0, plan.measured.1)?;
        self.check_collapsed_pair(plan.measured.0, plan.measured.1, outcome)?;
        self.state.retire(&[plan.measured.0, plan.measured.1])?;
        self.topology
            .apply_contraction(&plan, outcome, PairStatus::Live)?;
        if let Party::Member(k) = party {
            self.chain_members.retain(|&m| m != k);
        }
        self.record(party, RecordKind::Swap, plan.measured, outcome);
        if self.config.policy == DisclosurePolicy::Immediate {
            let seq = self.transcript.last().expect("just recorded").sequence;
            self.mark_announced(seq)?;
        }
        Ok(outcome)
    }

    /// Emits the sender's order directive without executing its
    /// contractions; returns the members that must swap, in order. The
    /// distributed driver uses this and lets each member act on its turn.
    pub fn announce_directive(&mut self) -> Result<Vec<u16>> {
        if self.directive_applied {
            return Err(Error::ProtocolOrder(
                "the order directive was already applied".into(),
            ));
        }
        if self.phase != Phase::Setup {
            return Err(Error::ProtocolOrder(
                "the order directive must precede feeding".into(),
            ));
        }
        let mut bits = vec![self.config.receiver as u8];
        bits.extend(self.directive.iter().map(|&m| m as u8));
        self.push_event(EventKind::OrderDirective, Party::Alice, bits);
        self.directive_applied = true;
        Ok(self.directive.clone())
    }

    /// Emits the sender's order directive and executes its contractions:
    /// excluded members first, then the tail above the receiver.
    pub fn apply_receiver_directive(&mut self) -> Result<()> {
        let order = self.announce_directive()?;
        for m in order {
            self.entanglement_swap(Party::Member(m))?;
        }
        debug_assert_eq!(self.chain_members, self.config.chain_members());
        Ok(())
    }

    /// Alice's two feeding measurements: payload qubit 1 against the first
    /// feed pair, then payload qubit 2 against the second. Afterwards the
    /// member halves of the feed pairs carry the shares.
    pub fn feed(&mut self) -> Result<(BellLabel, BellLabel)> {
        if !self.directive_applied {
            return Err(Error::ProtocolOrder(
                "feeding requires the order directive first".into(),
            ));
        }
        if self.phase != Phase::Setup {
            return Err(Error::ProtocolOrder("feeding happens exactly once".into()));
        }
        if self.chain_members != self.config.chain_members() {
            return Err(Error::ProtocolOrder(
                "feeding before the directed contractions completed".into(),
            ));
        }
        let chain_len = self.chain_members.len() as u16;
        let mut outcomes = [BellLabel::default(); 2];
        let mut channels = [BellLabel::default(); 2];
        let mut member_halves = [QubitRef::new(Party::Alice, 0); 2];
        for leg in 1..=2u8 {
            let pair = *self.topology.feed_pair(leg)?;
            self.ensure_live(pair.id)?;
            let payload_qubit = QubitRef::new(Party::Alice, leg - 1);
            let (alice_half, member_half) = if pair.a.owner == Party::Alice {
                (pair.a, pair.b)
            } else {
                (pair.b, pair.a)
            };
            let (outcome, _) = self.next_outcome(payload_qubit, alice_half)?;
            self.check_collapsed_pair(payload_qubit, alice_half, outcome)?;
            self.state.retire(&[payload_qubit, alice_half])?;
            self.topology.pair_mut(pair.id)?.status = PairStatus::Consumed;
            self.record(
                Party::Alice,
                RecordKind::Feed { leg },
                (payload_qubit, alice_half),
                outcome,
            );
            if self.config.policy == DisclosurePolicy::Immediate {
                let seq = self.transcript.last().expect("just recorded").sequence;
                self.mark_announced(seq)?;
            }
            outcomes[leg as usize - 1] = outcome;
            channels[leg as usize - 1] = pair.label;
            member_halves[leg as usize - 1] = member_half;
        }
        self.frame = Some(FrameState::after_feed_via(
            chain_len,
            (channels[0], outcomes[0]),
            (channels[1], outcomes[1]),
        )?);
        self.carriers = Some((member_halves[0], member_halves[1]));
        self.aliases = self.carriers;
        self.phase = if self.carriers_delivered() {
            Phase::Delivered
        } else {
            Phase::Fed
        };
        Ok((outcomes[0], outcomes[1]))
    }

    fn carriers_delivered(&self) -> bool {
        let receiver = self.receiver_party();
        self.carriers
            .map(|(c1, c2)| c1.owner == receiver && c2.owner == receiver)
            .unwrap_or(false)
    }

    fn member_index(party: Party) -> Result<u16> {
        match party {
            Party::Member(k) => Ok(k),
            Party::Alice => Err(Error::Precondition(
                "the sender never holds a carrier after feeding".into(),
            )),
        }
    }

    /// The member whose turn it is: the lowest-indexed carrier holder that
    /// is not the receiver.
    pub fn next_actor(&self) -> Result<(u16, PayloadSlot)> {
        let (c1, c2) = self.carriers.ok_or_else(|| {
            Error::ProtocolOrder("no carriers before the feeding measurements".into())
        })?;
        let o1 = Self::member_index(c1.owner)?;
        let o2 = Self::member_index(c2.owner)?;
        let receiver = self.config.receiver;
        match (o1 == receiver, o2 == receiver) {
            (true, true) => Err(Error::ProtocolOrder(
                "both shares already sit at the receiver".into(),
            )),
            (false, true) => Ok((o1, PayloadSlot::First)),
            (true, false) => Ok((o2, PayloadSlot::Second)),
            (false, false) => {
                if o1 == o2 {
                    Err(Error::Precondition(format!(
                        "both shares sit at B{o1}; honest passing is undefined"
                    )))
                } else if o1 < o2 {
                    Ok((o1, PayloadSlot::First))
                } else {
                    Ok((o2, PayloadSlot::Second))
                }
            }
        }
    }

    /// One chain pass: the acting member measures his carrier against his
    /// spare pair half, hopping the share to that pair's far end.
    pub fn pass_step(&mut self) -> Result<MeasurementRecord> {
        if self.phase != Phase::Fed {
            return Err(Error::ProtocolOrder(
                "passes run between feeding and delivery".into(),
            ));
        }
        let (actor_idx, mover) = self.next_actor()?;
        let actor = Party::Member(actor_idx);
        let (c1, c2) = self.carriers.expect("fed");
        let (a1, a2) = self.aliases.expect("fed");
        let (carrier, alias) = match mover {
            PayloadSlot::First => (c1, a1),
            PayloadSlot::Second => (c2, a2),
        };
        let spare: Vec<QubitRef> = self
            .topology
            .unconsumed_halves(actor)
            .into_iter()
            .filter(|&q| q != c1 && q != c2)
            .collect();
        if spare.len() != 1 {
            return Err(Error::Precondition(format!(
                "{actor} holds {} spare pair halves, expected exactly 1",
                spare.len()
            )));
        }
        let half = spare[0];
        let pair = *self
            .topology
            .pair_containing(half)
            .expect("spare halves come from unconsumed pairs");
        self.ensure_live(pair.id)?;
        let (outcome, _) = self.next_outcome(carrier, half)?;
        self.check_collapsed_pair(carrier, half, outcome)?;
        self.state.retire(&[carrier, half])?;
        self.topology.pair_mut(pair.id)?.status = PairStatus::Consumed;
        let landing = pair.partner_of(half).expect("half is in pair");
        let step = self
            .frame
            .as_mut()
            .expect("fed")
            .pass_via(mover, pair.label, outcome)?;
        match mover {
            PayloadSlot::First => {
                self.carriers = Some((landing, c2));
                self.aliases = Some((landing, a2));
            }
            PayloadSlot::Second => {
                self.carriers = Some((c1, landing));
                self.aliases = Some((a1, landing));
            }
        }
        let record = self.record(actor, RecordKind::Pass { step }, (alias, half), outcome);
        if self.config.policy == DisclosurePolicy::Immediate {
            self.mark_announced(record.sequence)?;
        }
        if self.carriers_delivered() {
            self.phase = Phase::Delivered;
            if self.config.verify_invariants {
                let frame_done = self.frame.as_ref().expect("fed").delivered();
                if !frame_done {
                    return Err(Error::Numerical(
                        "carriers reached the receiver before the frame finished".into(),
                    ));
                }
            }
        }
        Ok(record)
    }

    /// Receiver-side retrieval from announced records only: replays the
    /// announcements into a correction word, applies it to the carriers,
    /// and scores the result against the fed payload.
    pub fn retrieve(&mut self, announcements: &[MeasurementRecord]) -> Result<RetrievalOutcome> {
        if self.phase != Phase::Delivered {
            return Err(Error::ProtocolOrder(format!(
                "retrieval requires delivery (phase {:?})",
                self.phase
            )));
        }
        let mut usable: Vec<MeasurementRecord> = Vec::new();
        for r in announcements {
            if matches!(r.kind, RecordKind::Covert) {
                continue;
            }
            if usable.iter().any(|u| u.sequence == r.sequence) {
                continue;
            }
            usable.push(r.clone());
        }
        let mut swaps = 0usize;
        let mut feeds = 0usize;
        let mut passes = 0usize;
        for r in &usable {
            match r.kind {
                RecordKind::Swap => swaps += 1,
                RecordKind::Feed { .. } => feeds += 1,
                RecordKind::Pass { .. } => passes += 1,
                RecordKind::Covert => {}
            }
        }
        let need_swaps = self.directive.len();
        let need_passes = self.chain_members.len() - 1;
        let missing = need_swaps.saturating_sub(swaps)
            + 2usize.saturating_sub(feeds)
            + need_passes.saturating_sub(passes);
        if missing > 0 {
            return Err(Error::IncompleteTranscript { missing });
        }
        let replayed = replay_retrieval(self.config.parties, &usable)?;
        if replayed.receiver != self.receiver_party() {
            return Err(Error::ProtocolOrder(format!(
                "announced records deliver to {}, this session's receiver is {}",
                replayed.receiver,
                self.receiver_party()
            )));
        }
        if self.config.verify_invariants {
            let frame_word = self.frame.as_ref().expect("delivered").retrieval_word()?;
            if frame_word != replayed.word {
                return Err(Error::Numerical(format!(
                    "frame word {frame_word} disagrees with announcement replay {}",
                    replayed.word
                )));
            }
        }
        let word = replayed.word;
        let carriers = self.carriers.expect("delivered");
        word.apply_to(&mut self.state, carriers)?;
        let target = self.config.payload.register_amplitudes();
        let (fidelity, pure) = match self.state.extract(&[carriers.0, carriers.1]) {
            Ok(pair_state) => (pair_state.fidelity_with_amps(&target)?, true),
            Err(Error::EntangledRetirement { .. }) => {
                let rho = self.state.reduced_density(&[carriers.0, carriers.1])?;
                (rho.fidelity_with_pure(&target)?, false)
            }
            Err(other) => return Err(other),
        };
        self.push_event(
            EventKind::Retrieval,
            self.receiver_party(),
            vec![word.z1, word.x1, word.z2, word.x2],
        );
        self.phase = Phase::Retrieved;
        let outcome = RetrievalOutcome {
            word,
            fidelity,
            pure,
        };
        self.retrieval = Some(outcome);
        Ok(outcome)
    }

    /// Post-retrieval probe: Bell-measures the carrier pair in place (used
    /// by verification rounds). Consumes the recovered state.
    pub fn measure_received_pair(&mut self) -> Result<BellLabel> {
        if self.phase != Phase::Retrieved {
            return Err(Error::ProtocolOrder(
                "the received pair exists only after retrieval".into(),
            ));
        }
        let (c1, c2) = self.carriers.expect("retrieved");
        let (label, _) = self.state.bell_measure(c1, c2, &mut self.rng)?;
        self.push_event(
            EventKind::TestResponse,
            self.receiver_party(),
            vec![label.mu, label.nu],
        );
        Ok(label)
    }

    /// Diagnostic probe for runs whose chain was cut: materializes the
    /// party's unconsumed pair halves and Bell-measures them.
    pub fn measure_party_halves(&mut self, party: Party) -> Result<BellLabel> {
        let halves = self.topology.unconsumed_halves(party);
        if halves.len() != 2 {
            return Err(Error::Precondition(format!(
                "{party} holds {} unconsumed halves, need 2 to probe",
                halves.len()
            )));
        }
        for q in [halves[0], halves[1]] {
            let id = self.topology.pair_containing(q).expect("unconsumed").id;
            self.ensure_live(id)?;
        }
        let (label, _) = self.state.bell_measure(halves[0], halves[1], &mut self.rng)?;
        self.push_event(EventKind::TestResponse, party, vec![label.mu, label.nu]);
        Ok(label)
    }

    /// Reduced state of every live qubit a party currently holds (pair
    /// halves are materialized first), low address in the low bit.
    pub fn party_view(&mut self, party: Party) -> Result<crate::quantum::DensityMatrix> {
        self.subset_view(&[party])
    }

    /// Joint reduced state of every qubit the listed parties hold, sorted
    /// by address (lowest address in the low bit). Pending pair halves they
    /// own are materialized first.
    pub fn subset_view(&mut self, parties: &[Party]) -> Result<crate::quantum::DensityMatrix> {
        let pending: Vec<u32> = self
            .topology
            .pairs()
            .iter()
            .filter(|p| {
                p.status == PairStatus::Pending && parties.iter().any(|&party| p.touches(party))
            })
            .map(|p| p.id)
            .collect();
        for id in pending {
            self.ensure_live(id)?;
        }
        let mut held: Vec<QubitRef> = self
            .state
            .qubits()
            .iter()
            .copied()
            .filter(|q| parties.contains(&q.owner))
            .collect();
        held.sort();
        if held.is_empty() {
            return Err(Error::Precondition(
                "none of the listed parties holds a live qubit".into(),
            ));
        }
        self.state.reduced_density(&held)
    }

    // Adversary instrumentation. These model what colluding members can do
    // with their own hardware; they keep the session's bookkeeping coherent
    // but never touch the frame or announce anything.

    /// Registers and materializes a pair prepared privately by `sender`.
    pub fn inject_private_pair(
        &mut self,
        sender: Party,
        a: QubitRef,
        b: QubitRef,
        label: BellLabel,
    ) -> Result<u32> {
        let id = self
            .topology
            .add_private_pair(a, b, label, PairStatus::Pending)?;
        self.push_event(
            EventKind::PairPrepared,
            sender,
            vec![label.mu, label.nu, PAIR_ORIGIN_PRIVATE],
        );
        self.ensure_live(id)?;
        Ok(id)
    }

    /// Tensors an arbitrary prepared block into the register (fake payload
    /// qubits). The qubits belong to no pair.
    pub fn inject_block(&mut self, qubits: &[QubitRef], amps: &[Complex64]) -> Result<()> {
        self.state.append_state(qubits, amps)
    }

    /// A measurement performed off the record: sampled from the same seeded
    /// stream (or forced onto a chosen branch), recorded as covert, never
    /// announced, frame untouched.
    pub fn covert_measure(
        &mut self,
        actor: Party,
        q1: QubitRef,
        q2: QubitRef,
        forced: Option<BellLabel>,
    ) -> Result<BellLabel> {
        let (label, prob) = match forced {
            Some(label) => {
                let p = self.state.bell_measure_forced(q1, q2, label)?;
                (label, p)
            }
            None => self.state.bell_measure(q1, q2, &mut self.rng)?,
        };
        self.branch_probability *= prob;
        self.state.retire(&[q1, q2])?;
        for q in [q1, q2] {
            if let Some(pair) = self.topology.pair_containing(q) {
                let id = pair.id;
                self.topology.pair_mut(id)?.status = PairStatus::Consumed;
            }
        }
        self.record(actor, RecordKind::Covert, (q1, q2), label);
        Ok(label)
    }

    /// Repoints one carrier slot at a different live qubit while keeping
    /// the recorded alias (announcements keep naming the expected address).
    pub fn substitute_carrier(&mut self, slot: PayloadSlot, q: QubitRef) -> Result<()> {
        if !self.state.contains(q) {
            return Err(Error::Precondition(format!(
                "substitute carrier {q} is not live in the register"
            )));
        }
        let (c1, c2) = self.carriers.ok_or_else(|| {
            Error::ProtocolOrder("carriers exist only after feeding".into())
        })?;
        self.carriers = Some(match slot {
            PayloadSlot::First => (q, c2),
            PayloadSlot::Second => (c1, q),
        });
        Ok(())
    }

    /// Builds the final report; retrieval must have happened.
    pub fn report(&self, driver: Driver) -> Result<RunReport> {
        let retrieval = self.retrieval.ok_or_else(|| {
            Error::ProtocolOrder("no retrieval outcome to report".into())
        })?;
        Ok(self.build_report(driver, retrieval.fidelity, retrieval.word))
    }

    /// Report assembly for flows that never retrieve (cut chains); the
    /// caller supplies the externally determined fidelity.
    pub fn build_report(&self, driver: Driver, fidelity: f64, correction: PauliWord2) -> RunReport {
        RunReport {
            schema: REPORT_SCHEMA_VERSION,
            parties: self.config.parties,
            receiver: self.config.receiver,
            seed: self.config.seed,
            policy: self.config.policy,
            driver,
            fidelity,
            branch_probability: self.branch_probability,
            correction,
            transcript: self.transcript.clone(),
            ledger: measured_ledger(self.config.parties, &self.transcript, &self.events),
            events: self.events.clone(),
        }
    }
}

/// Runs one complete session in process: directive, feed, passes, batch
/// announcements, retrieval.
pub fn run_full(config: ProtocolConfig) -> Result<RunReport> {
    let mut session = Session::start(config)?;
    session.apply_receiver_directive()?;
    session.feed()?;
    while !session.delivered() {
        session.pass_step()?;
    }
    session.finish_announcements()?;
    let announced = session.announced_records();
    session.retrieve(&announced)?;
    session.report(Driver::Engine)
}

/// Aggregate of an exhaustive forced-branch sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnumerationSummary {
    pub parties: u16,
    pub branches: u64,
    pub probability_sum: f64,
    pub min_fidelity: f64,
    pub max_fidelity: f64,
}

/// Forces every outcome combination of a default run and checks that each
/// branch delivers. Bounded to 6 members (4^(N+1) branches).
pub fn enumerate_branches(parties: u16, payload: &TwoQubitState) -> Result<EnumerationSummary> {
    if !(2..=6).contains(&parties) {
        return Err(Error::Config(format!(
            "exhaustive enumeration supports 2..=6 members, got {parties}"
        )));
    }
    let measurements = parties as u32 + 1;
    let branches = 4u64.pow(measurements);
    let mut probability_sum = 0.0;
    let mut min_fidelity = f64::INFINITY;
    let mut max_fidelity = f64::NEG_INFINITY;
    for code in 0..branches {
        let forced: Vec<BellLabel> = (0..measurements)
            .map(|i| BellLabel::from_index(((code >> (2 * i)) & 3) as usize))
            .collect();
        let mut config = ProtocolConfig::new(parties, 0);
        config.payload = payload.clone();
        config.materialization = Materialization::Upfront;
        config.forced_outcomes = Some(forced);
        let report = run_full(config)?;
        probability_sum += report.branch_probability;
        min_fidelity = min_fidelity.min(report.fidelity);
        max_fidelity = max_fidelity.max(report.fidelity);
    }
    Ok(EnumerationSummary {
        parties,
        branches,
        probability_sum,
        min_fidelity,
        max_fidelity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn payload() -> TwoQubitState {
        // A generic entangled payload with all four coefficients distinct.
        TwoQubitState::from_coefficients_normalized([
            Complex64::new(0.5, 0.1),
            Complex64::new(-0.3, 0.4),
            Complex64::new(0.2, -0.6),
            Complex64::new(0.1, 0.25),
        ])
        .unwrap()
    }

    #[test]
    fn coefficient_order_round_trips() {
        let k = [
            Complex64::new(0.6, 0.0),
            Complex64::new(0.0, 0.8),
            Complex64::ZERO,
            Complex64::ZERO,
        ];
        let s = TwoQubitState::from_coefficients(k).unwrap();
        assert_eq!(s.coefficients(), k);
        // |i, j> puts i in the register's low bit.
        let b = TwoQubitState::basis(1, 0);
        assert_eq!(b.register_amplitudes()[0b01], Complex64::ONE);
        assert!(TwoQubitState::from_coefficients([Complex64::ONE; 4]).is_err());
    }

    #[test]
    fn default_three_member_run_starts_with_ten_dense_qubits() {
        let mut config = ProtocolConfig::new(3, 7);
        config.payload = payload();
        let session = Session::start(config).unwrap();
        assert_eq!(session.state().qubit_count(), 10);
        assert_eq!(session.topology().pairs().len(), 4);
        assert_eq!(session.phase(), Phase::Setup);
    }

    #[test]
    fn lazy_sessions_keep_the_register_small() {
        let mut config = ProtocolConfig::new(12, 3);
        config.payload = payload();
        let session = Session::start(config).unwrap();
        // Auto switches to lazy above the upfront limit: payload only.
        assert_eq!(session.state().qubit_count(), 2);
    }

    #[test]
    fn full_runs_recover_the_payload_exactly() {
        for n in [2u16, 3, 4, 5] {
            for seed in [0u64, 1, 42] {
                let mut config = ProtocolConfig::new(n, seed);
                config.payload = payload();
                let report = run_full(config).unwrap();
                assert!(
                    report.fidelity > FIDELITY_EXIT_THRESHOLD,
                    "n={n} seed={seed} fidelity={}",
                    report.fidelity
                );
                assert_eq!(report.transcript.len(), n as usize + 1);
                assert_abs_diff_eq!(
                    report.branch_probability,
                    0.25f64.powi(n as i32 + 1),
                    epsilon = 1e-12
                );
                assert!(report.transcript.iter().all(|r| r.announced));
            }
        }
    }

    #[test]
    fn materialization_choice_never_changes_the_transcript() {
        for seed in 0..8u64 {
            let mut upfront = ProtocolConfig::new(5, seed);
            upfront.payload = payload();
            upfront.materialization = Materialization::Upfront;
            let mut lazy = upfront.clone();
            lazy.materialization = Materialization::Lazy;
            let a = run_full(upfront).unwrap();
            let b = run_full(lazy).unwrap();
            assert_eq!(a.transcript, b.transcript, "seed {seed}");
            assert_abs_diff_eq!(a.fidelity, b.fidelity, epsilon = 1e-9);
        }
    }

    #[test]
    fn receiver_change_contracts_the_tail() {
        let mut config = ProtocolConfig::new(5, 11);
        config.payload = payload();
        config.receiver = 2;
        let report = run_full(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
        // 3 swaps, 2 feeds, 1 pass.
        let swaps = report
            .transcript
            .iter()
            .filter(|r| matches!(r.kind, RecordKind::Swap))
            .count();
        assert_eq!(swaps, 3);
        assert_eq!(report.transcript.len(), 6);
        let swap_actors: Vec<Party> = report
            .transcript
            .iter()
            .filter(|r| matches!(r.kind, RecordKind::Swap))
            .map(|r| r.actor)
            .collect();
        assert_eq!(
            swap_actors,
            vec![Party::Member(5), Party::Member(4), Party::Member(3)]
        );
    }

    #[test]
    fn first_member_can_receive_without_any_pass() {
        let mut config = ProtocolConfig::new(4, 9);
        config.payload = payload();
        config.receiver = 1;
        let report = run_full(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
        assert!(report
            .transcript
            .iter()
            .all(|r| !matches!(r.kind, RecordKind::Pass { .. })));
    }

    #[test]
    fn interior_exclusions_reroute_the_chain() {
        let mut config = ProtocolConfig::new(6, 21);
        config.payload = payload();
        config.exclusions = vec![3];
        let report = run_full(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
        assert!(report
            .transcript
            .iter()
            .all(|r| r.actor != Party::Member(3) || matches!(r.kind, RecordKind::Swap)));

        let mut config = ProtocolConfig::new(6, 22);
        config.payload = payload();
        config.exclusions = vec![1];
        let report = run_full(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
    }

    #[test]
    fn forced_outcomes_replay_a_chosen_branch() {
        let mut config = ProtocolConfig::new(3, 0);
        config.payload = payload();
        config.forced_outcomes = Some(vec![
            BellLabel::new(1, 0),
            BellLabel::new(0, 1),
            BellLabel::new(1, 1),
            BellLabel::new(0, 0),
        ]);
        let report = run_full(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
        let outcomes: Vec<BellLabel> = report.transcript.iter().map(|r| r.outcome).collect();
        assert_eq!(
            outcomes,
            vec![
                BellLabel::new(1, 0),
                BellLabel::new(0, 1),
                BellLabel::new(1, 1),
                BellLabel::new(0, 0),
            ]
        );
        assert_abs_diff_eq!(report.branch_probability, 0.25f64.powi(4), epsilon = 1e-12);
    }

    #[test]
    fn misordered_operations_are_rejected() {
        let mut config = ProtocolConfig::new(3, 0);
        config.payload = payload();
        let mut session = Session::start(config).unwrap();
        assert!(matches!(
            session.feed().unwrap_err(),
            Error::ProtocolOrder(_)
        ));
        session.apply_receiver_directive().unwrap();
        assert!(matches!(
            session.apply_receiver_directive().unwrap_err(),
            Error::ProtocolOrder(_)
        ));
        assert!(matches!(
            session.pass_step().unwrap_err(),
            Error::ProtocolOrder(_)
        ));
        session.feed().unwrap();
        assert!(matches!(
            session.retrieve(&[]).unwrap_err(),
            Error::ProtocolOrder(_)
        ));
        session.pass_step().unwrap();
        session.pass_step().unwrap();
        assert!(session.delivered());
        // Deferred policy: nothing announced yet.
        let err = session.retrieve(&session.announced_records()).unwrap_err();
        assert!(matches!(err, Error::IncompleteTranscript { missing: 4 }));
        session.finish_announcements().unwrap();
        let announced = session.announced_records();
        let outcome = session.retrieve(&announced).unwrap();
        assert!(outcome.fidelity > FIDELITY_EXIT_THRESHOLD);
        assert!(outcome.pure);
    }

    #[test]
    fn bad_configurations_are_rejected() {
        assert!(Session::start(ProtocolConfig::new(1, 0)).is_err());
        assert!(Session::start(ProtocolConfig::new(65, 0)).is_err());
        let mut config = ProtocolConfig::new(4, 0);
        config.receiver = 5;
        assert!(Session::start(config).is_err());
        let mut config = ProtocolConfig::new(4, 0);
        config.exclusions = vec![4];
        assert!(matches!(
            Session::start(config).unwrap_err(),
            Error::Config(_)
        ));
        let mut config = ProtocolConfig::new(4, 0);
        config.forced_outcomes = Some(vec![BellLabel::default(); 3]);
        assert!(matches!(
            Session::start(config).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn immediate_policy_announces_as_it_goes() {
        let mut config = ProtocolConfig::new(3, 5);
        config.payload = payload();
        config.policy = DisclosurePolicy::Immediate;
        let mut session = Session::start(config).unwrap();
        session.apply_receiver_directive().unwrap();
        session.feed().unwrap();
        assert_eq!(session.announced_records().len(), 2);
        session.pass_step().unwrap();
        assert_eq!(session.announced_records().len(), 3);
        session.pass_step().unwrap();
        let announced = session.announced_records();
        let outcome = session.retrieve(&announced).unwrap();
        assert!(outcome.fidelity > FIDELITY_EXIT_THRESHOLD);
    }

    #[test]
    fn small_enumerations_cover_every_branch_exactly() {
        let summary = enumerate_branches(2, &payload()).unwrap();
        assert_eq!(summary.branches, 64);
        assert_abs_diff_eq!(summary.probability_sum, 1.0, epsilon = 1e-9);
        assert!(summary.min_fidelity > FIDELITY_EXIT_THRESHOLD);
        assert!(enumerate_branches(7, &payload()).is_err());
    }
}
