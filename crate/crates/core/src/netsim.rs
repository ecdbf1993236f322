//! The protocol driven over a simulated classical network.
//!
//! The quantum substrate stays in one [`Session`] (physics is global); the
//! classical layer is not. Each party runs as an actor that only sees the
//! messages delivered to it, acts when its own local knowledge says it is
//! its turn, and learns outcomes through explicit announcements. A run over
//! this network must reproduce the in-process driver bit for bit: same
//! seed, same transcript, same correction, same fidelity.
//!
//! Scheduling is deterministic: time advances in unit ticks, due messages
//! deliver in send order, and actors are polled in a fixed order (the
//! sender first, then members by index) with at most one action per tick.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::protocol::{ProtocolConfig, RetrievalOutcome, Session};
use crate::quantum::{BellLabel, Party};
use crate::report::{Driver, EventKind, MeasurementRecord, RunReport};

/// Per-hop message latency in ticks.
const LATENCY: u64 = 1;

/// Safety cap: ticks a run may take before it is declared stalled.
fn tick_budget(parties: u16) -> u64 {
    1_000 + 50 * u64::from(parties)
}

/// Classical payloads the parties exchange.
#[derive(Clone, Debug, PartialEq)]
pub enum MessageKind {
    /// The sender's choice of receiver and the contraction list, in the
    /// order the named members must swap.
    Directive {
        receiver: u16,
        contractions: Vec<u16>,
    },
    /// A named member finished its contraction.
    SwapDone { member: u16 },
    /// The sender finished both feeding measurements.
    FeedDone,
    /// A chain pass finished.
    PassDone { step: u16 },
    /// One broadcast measurement record.
    Announcement(MeasurementRecord),
    /// The receiver asks everyone to flush withheld outcomes.
    AnnounceRequest,
    /// The sender asks the receiver to Bell-measure the received pair.
    TestRequest,
    /// The receiver's test measurement outcome.
    TestResponse { outcome: BellLabel },
}

/// One in-flight message. `to: None` broadcasts to everyone but the sender.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub sent_at: u64,
    pub deliver_at: u64,
    pub from: Party,
    pub to: Option<Party>,
    pub kind: MessageKind,
}

/// What one actor privately knows and has done.
#[derive(Clone, Debug)]
pub struct PartyActor {
    party: Party,
    /// Announced records this actor has received (its classical knowledge
    /// of other parties' outcomes).
    knowledge: Vec<MeasurementRecord>,
    directive: Option<(u16, Vec<u16>)>,
    swaps_seen: Vec<u16>,
    feed_seen: bool,
    passes_seen: u16,
    directive_sent: bool,
    fed: bool,
    swapped: bool,
    passed: bool,
    announce_requested: bool,
    announced_own: bool,
    test_requested: bool,
    retrieved: bool,
    last_attempt_knowledge: usize,
}

impl PartyActor {
    fn new(party: Party) -> Self {
        PartyActor {
            party,
            knowledge: Vec::new(),
            directive: None,
            swaps_seen: Vec::new(),
            feed_seen: false,
            passes_seen: 0,
            directive_sent: false,
            fed: false,
            swapped: false,
            passed: false,
            announce_requested: false,
            announced_own: false,
            test_requested: false,
            retrieved: false,
            last_attempt_knowledge: usize::MAX,
        }
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn knowledge(&self) -> &[MeasurementRecord] {
        &self.knowledge
    }

    /// Chain members implied by the received directive, ascending.
    fn chain(&self) -> Option<Vec<u16>> {
        let (receiver, contractions) = self.directive.as_ref()?;
        Some(
            (1..=*receiver)
                .filter(|m| !contractions.contains(m))
                .collect(),
        )
    }

    fn deliver(&mut self, msg: &Message) -> Result<()> {
        match &msg.kind {
            MessageKind::Directive {
                receiver,
                contractions,
            } => {
                let incoming = (*receiver, contractions.clone());
                if let Some(existing) = &self.directive {
                    if *existing != incoming {
                        return Err(Error::ProtocolOrder(format!(
                            "{} received a conflicting order directive",
                            self.party
                        )));
                    }
                } else {
                    self.directive = Some(incoming);
                }
            }
            MessageKind::SwapDone { member } => {
                if !self.swaps_seen.contains(member) {
                    self.swaps_seen.push(*member);
                }
            }
            MessageKind::FeedDone => self.feed_seen = true,
            MessageKind::PassDone { step } => {
                self.passes_seen = self.passes_seen.max(*step);
            }
            MessageKind::Announcement(record) => {
                if let Some(existing) = self
                    .knowledge
                    .iter()
                    .find(|r| r.sequence == record.sequence)
                {
                    if !existing.same_measurement(record) {
                        return Err(Error::ProtocolOrder(format!(
                            "{} received conflicting announcements for sequence {}",
                            self.party, record.sequence
                        )));
                    }
                } else {
                    self.knowledge.push(record.clone());
                }
            }
            MessageKind::AnnounceRequest => self.announce_requested = true,
            MessageKind::TestRequest => self.test_requested = true,
            MessageKind::TestResponse { .. } => {}
        }
        Ok(())
    }
}

/// The shared quantum substrate plus the classical network between actors.
pub struct World {
    session: Session,
    actors: Vec<PartyActor>,
    queue: VecDeque<Message>,
    now: u64,
    early_retrieval_attempts: u32,
    test_response: Option<BellLabel>,
}

impl World {
    /// Starts a session and spawns one actor per party.
    pub fn spawn(config: ProtocolConfig) -> Result<Self> {
        let parties = config.parties;
        let session = Session::start(config)?;
        let mut actors = vec![PartyActor::new(Party::Alice)];
        actors.extend((1..=parties).map(|k| PartyActor::new(Party::Member(k))));
        Ok(World {
            session,
            actors,
            queue: VecDeque::new(),
            now: 0,
            early_retrieval_attempts: 0,
            test_response: None,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Retrieval attempts the receiver made before its knowledge was
    /// complete.
    pub fn early_retrieval_attempts(&self) -> u32 {
        self.early_retrieval_attempts
    }

    pub fn actor(&self, party: Party) -> Option<&PartyActor> {
        self.actors.iter().find(|a| a.party == party)
    }

    /// Injects a message into the network (tests use this to model forged
    /// or duplicated classical traffic).
    pub fn post(&mut self, from: Party, to: Option<Party>, kind: MessageKind) {
        self.queue.push_back(Message {
            sent_at: self.now,
            deliver_at: self.now + LATENCY,
            from,
            to,
            kind,
        });
    }

    fn receiver_index(&self) -> usize {
        self.session.config().receiver as usize
    }

    /// One tick: deliver everything due, then poll every actor once.
    /// Returns false when the network is quiescent.
    pub fn step(&mut self) -> Result<bool> {
        self.now += 1;
        let mut activity = false;

        let mut due = Vec::new();
        let mut rest = VecDeque::new();
        while let Some(msg) = self.queue.pop_front() {
            if msg.deliver_at <= self.now {
                due.push(msg);
            } else {
                rest.push_back(msg);
            }
        }
        self.queue = rest;
        for msg in due {
            activity = true;
            if let MessageKind::TestResponse { outcome } = msg.kind {
                if msg.to == Some(Party::Alice) {
                    self.test_response = Some(outcome);
                    continue;
                }
            }
            match msg.to {
                Some(target) => {
                    let actor = self
                        .actors
                        .iter_mut()
                        .find(|a| a.party == target)
                        .ok_or_else(|| {
                            Error::Precondition(format!("message addressed to unknown {target}"))
                        })?;
                    actor.deliver(&msg)?;
                }
                None => {
                    for actor in &mut self.actors {
                        if actor.party != msg.from {
                            actor.deliver(&msg)?;
                        }
                    }
                }
            }
        }

        for i in 0..self.actors.len() {
            if self.poll_actor(i)? {
                activity = true;
            }
        }
        Ok(activity || !self.queue.is_empty())
    }

    /// Runs ticks until quiescent; errors if the tick budget runs out.
    pub fn run_to_quiescence(&mut self) -> Result<()> {
        let budget = tick_budget(self.session.config().parties);
        while self.step()? {
            if self.now > budget {
                return Err(Error::ProtocolOrder(format!(
                    "network stalled: no quiescence within {budget} ticks"
                )));
            }
        }
        Ok(())
    }

    /// The receiver tries to retrieve right now from whatever it knows;
    /// failures for lack of announcements are counted, not fatal.
    pub fn attempt_retrieval_now(&mut self) -> Result<RetrievalOutcome> {
        let receiver = self.receiver_index();
        let knowledge = self.actors[receiver].knowledge.clone();
        match self.session.retrieve(&knowledge) {
            Ok(outcome) => {
                self.actors[receiver].retrieved = true;
                Ok(outcome)
            }
            Err(e) => {
                if matches!(e, Error::IncompleteTranscript { .. }) {
                    self.early_retrieval_attempts += 1;
                }
                Err(e)
            }
        }
    }

    fn send(&mut self, from: Party, to: Option<Party>, kind: MessageKind) {
        self.post(from, to, kind);
    }

    fn own_unannounced(&self, party: Party) -> Vec<u32> {
        self.session
            .transcript()
            .iter()
            .filter(|r| r.actor == party && !r.announced)
            .map(|r| r.sequence)
            .collect()
    }

    fn record_by_sequence(&self, seq: u32) -> MeasurementRecord {
        self.session
            .transcript()
            .iter()
            .find(|r| r.sequence == seq)
            .expect("sequence came from the transcript")
            .clone()
    }

    fn broadcast_last_records(&mut self, party: Party, count: usize) {
        let records: Vec<MeasurementRecord> = self
            .session
            .transcript()
            .iter()
            .rev()
            .take(count)
            .rev()
            .cloned()
            .collect();
        for r in records {
            if r.announced {
                self.send(party, None, MessageKind::Announcement(r));
            }
        }
    }

    fn poll_actor(&mut self, idx: usize) -> Result<bool> {
        let party = self.actors[idx].party;
        match party {
            Party::Alice => self.poll_sender(idx),
            Party::Member(_) => self.poll_member(idx),
        }
    }

    fn poll_sender(&mut self, idx: usize) -> Result<bool> {
        if !self.actors[idx].directive_sent {
            let contractions = self.session.announce_directive()?;
            let receiver = self.session.config().receiver;
            self.actors[idx].directive_sent = true;
            self.send(
                Party::Alice,
                None,
                MessageKind::Directive {
                    receiver,
                    contractions,
                },
            );
            return Ok(true);
        }
        if !self.actors[idx].fed {
            let pending: Vec<u16> = self
                .session
                .config()
                .contraction_order()
                .into_iter()
                .filter(|m| !self.actors[idx].swaps_seen.contains(m))
                .collect();
            if pending.is_empty() {
                self.session.feed()?;
                self.actors[idx].fed = true;
                self.broadcast_last_records(Party::Alice, 2);
                self.send(Party::Alice, None, MessageKind::FeedDone);
                return Ok(true);
            }
            return Ok(false);
        }
        if self.actors[idx].announce_requested && !self.actors[idx].announced_own {
            for seq in self.own_unannounced(Party::Alice) {
                self.session.mark_announced(seq)?;
                let record = self.record_by_sequence(seq);
                self.send(Party::Alice, None, MessageKind::Announcement(record));
            }
            self.actors[idx].announced_own = true;
            return Ok(true);
        }
        Ok(false)
    }

    fn poll_member(&mut self, idx: usize) -> Result<bool> {
        let party = self.actors[idx].party;
        let k = match party {
            Party::Member(k) => k,
            Party::Alice => unreachable!("poll_member is only called for members"),
        };
        let Some((receiver, contractions)) = self.actors[idx].directive.clone() else {
            return Ok(false);
        };
        let chain = self.actors[idx].chain().expect("directive is set");

        if !self.actors[idx].swapped {
            if let Some(pos) = contractions.iter().position(|&m| m == k) {
                let earlier_done = contractions[..pos]
                    .iter()
                    .all(|m| self.actors[idx].swaps_seen.contains(m));
                if earlier_done {
                    self.session.entanglement_swap(party)?;
                    self.actors[idx].swapped = true;
                    self.broadcast_last_records(party, 1);
                    self.send(party, None, MessageKind::SwapDone { member: k });
                    return Ok(true);
                }
                return Ok(false);
            }
        }

        let is_receiver = k == receiver;
        if !is_receiver && !self.actors[idx].passed {
            if let Some(pos) = chain.iter().position(|&m| m == k) {
                let step = pos as u16 + 1;
                let triggered = if step == 1 {
                    self.actors[idx].feed_seen
                } else {
                    self.actors[idx].passes_seen >= step - 1
                };
                if !triggered {
                    return Ok(false);
                }
                self.session.pass_step()?;
                self.actors[idx].passed = true;
                self.broadcast_last_records(party, 1);
                self.send(party, None, MessageKind::PassDone { step });
                return Ok(true);
            }
        }

        if self.actors[idx].announce_requested && !self.actors[idx].announced_own {
            for seq in self.own_unannounced(party) {
                self.session.mark_announced(seq)?;
                let record = self.record_by_sequence(seq);
                self.send(party, None, MessageKind::Announcement(record));
            }
            self.actors[idx].announced_own = true;
            return Ok(true);
        }

        if is_receiver {
            let need_passes = chain.len() as u16 - 1;
            let delivered = self.actors[idx].feed_seen
                && self.actors[idx].passes_seen >= need_passes;
            if !delivered {
                return Ok(false);
            }
            let deferred = self.session.config().policy
                == crate::report::DisclosurePolicy::Deferred;
            if deferred && !self.actors[idx].announce_requested {
                self.actors[idx].announce_requested = true;
                self.actors[idx].announced_own = true;
                self.send(party, None, MessageKind::AnnounceRequest);
                return Ok(true);
            }
            if !self.actors[idx].retrieved {
                let have = self.actors[idx].knowledge.len();
                if have != self.actors[idx].last_attempt_knowledge {
                    self.actors[idx].last_attempt_knowledge = have;
                    match self.attempt_retrieval_now() {
                        Ok(_) => return Ok(true),
                        Err(Error::IncompleteTranscript { .. }) => return Ok(false),
                        Err(e) => return Err(e),
                    }
                }
                return Ok(false);
            }
            if self.actors[idx].test_requested {
                self.actors[idx].test_requested = false;
                let outcome = self.session.measure_received_pair()?;
                self.send(party, Some(Party::Alice), MessageKind::TestResponse { outcome });
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// After retrieval: the sender asks the receiver to Bell-measure the
    /// received pair and waits for the response.
    pub fn run_test_round(&mut self) -> Result<BellLabel> {
        let receiver = Party::Member(self.session.config().receiver);
        self.session
            .push_event(EventKind::TestRequest, Party::Alice, vec![]);
        self.test_response = None;
        self.post(Party::Alice, Some(receiver), MessageKind::TestRequest);
        let budget = self.now + tick_budget(self.session.config().parties);
        loop {
            self.step()?;
            if let Some(outcome) = self.test_response {
                return Ok(outcome);
            }
            if self.now > budget {
                return Err(Error::ProtocolOrder(
                    "no test response before the tick budget ran out".into(),
                ));
            }
        }
    }

    fn into_report(self) -> Result<RunReport> {
        self.session.report(Driver::Distributed)
    }
}

/// Runs one complete session over the simulated network.
pub fn run_distributed(config: ProtocolConfig) -> Result<RunReport> {
    let mut world = World::spawn(config)?;
    world.run_to_quiescence()?;
    let receiver = world.receiver_index();
    if !world.actors[receiver].retrieved {
        return Err(Error::ProtocolOrder(
            "the network went quiescent before the receiver retrieved".into(),
        ));
    }
    world.into_report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{run_full, TwoQubitState, FIDELITY_EXIT_THRESHOLD};
    use crate::report::DisclosurePolicy;
    use num_complex::Complex64;

    fn payload() -> TwoQubitState {
        TwoQubitState::from_coefficients_normalized([
            Complex64::new(0.3, -0.2),
            Complex64::new(0.5, 0.0),
            Complex64::new(-0.1, 0.6),
            Complex64::new(0.4, 0.25),
        ])
        .unwrap()
    }

    #[test]
    fn distributed_runs_match_the_engine_driver() {
        for (parties, receiver, seed) in [(2, 2, 3), (3, 3, 7), (5, 2, 11), (4, 1, 5)] {
            let mut config = ProtocolConfig::new(parties, seed);
            config.payload = payload();
            config.receiver = receiver;
            let engine = run_full(config.clone()).unwrap();
            let network = run_distributed(config).unwrap();
            assert_eq!(engine.transcript, network.transcript);
            assert_eq!(engine.correction, network.correction);
            assert_eq!(engine.fidelity, network.fidelity);
            assert_eq!(engine.ledger, network.ledger);
            assert_eq!(network.driver, Driver::Distributed);
        }
    }

    #[test]
    fn knowledge_stays_local_until_announced() {
        let mut config = ProtocolConfig::new(3, 19);
        config.payload = payload();
        config.policy = DisclosurePolicy::Deferred;
        let mut world = World::spawn(config).unwrap();
        // Step until the shares are delivered but before the receiver's
        // announcement request is answered.
        while !world.session().delivered() {
            world.step().unwrap();
        }
        for k in 1..=3u16 {
            assert!(
                world.actor(Party::Member(k)).unwrap().knowledge().is_empty(),
                "B{k} learned outcomes before any announcement"
            );
        }
        // An impatient receiver cannot retrieve yet.
        let err = world.attempt_retrieval_now().unwrap_err();
        assert!(matches!(err, Error::IncompleteTranscript { .. }));
        assert_eq!(world.early_retrieval_attempts(), 1);

        world.run_to_quiescence().unwrap();
        let receiver_knowledge = world.actor(Party::Member(3)).unwrap().knowledge();
        assert_eq!(receiver_knowledge.len(), 4);
        assert!(world.session().retrieval().is_some());
    }

    #[test]
    fn immediate_policy_streams_announcements() {
        let mut config = ProtocolConfig::new(3, 23);
        config.payload = payload();
        config.policy = DisclosurePolicy::Immediate;
        let report = run_distributed(config).unwrap();
        assert!(report.fidelity > FIDELITY_EXIT_THRESHOLD);
        assert!(report.transcript.iter().all(|r| r.announced));
    }

    #[test]
    fn conflicting_directives_are_detected() {
        let mut config = ProtocolConfig::new(3, 2);
        config.payload = payload();
        let mut world = World::spawn(config).unwrap();
        world.step().unwrap();
        world.post(
            Party::Alice,
            None,
            MessageKind::Directive {
                receiver: 1,
                contractions: vec![3, 2],
            },
        );
        let err = world.run_to_quiescence().unwrap_err();
        assert!(matches!(err, Error::ProtocolOrder(_)));
    }

    #[test]
    fn test_round_confirms_a_bell_payload() {
        let mut config = ProtocolConfig::new(3, 31);
        let label = BellLabel::new(1, 0);
        config.payload = TwoQubitState::bell(label);
        let mut world = World::spawn(config).unwrap();
        world.run_to_quiescence().unwrap();
        assert!(world.session().retrieval().is_some());
        let outcome = world.run_test_round().unwrap();
        assert_eq!(outcome, label);
    }
}
