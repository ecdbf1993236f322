//! Bell-pair wiring for a session.
//!
//! The distributed layout for N members uses N+1 pairs: two feeding pairs
//! from the sender to members 1 and 2, chain pairs (B_k, B_k+2) for
//! k = 1..N-2, and a closing pair (B_N-1, B_N). Members therefore form a
//! single path along pair hops, entered at both ends by the feeding pairs,
//! and the two payload shares walk that path toward the closing edge.
//!
//! Entanglement swaps contract the path: a member measuring his two halves
//! merges his two pairs into one whose label is the XOR of the originals
//! and the outcome. Receiver changes contract the tail; localization sweeps
//! contract interior members.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::{BellLabel, Party, QubitRef};

/// Lifecycle of a pair in the register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    /// Declared but not yet tensored into the dense register.
    Pending,
    /// Present in the dense register.
    Live,
    /// Both halves measured and retired.
    Consumed,
}

/// Where a pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    /// Part of the initial distribution.
    Distributed,
    /// Produced by an entanglement swap.
    SwapProduct,
    /// Injected privately by an adversary.
    AdversaryPrivate,
}

/// One Bell pair: two addressed halves and the label of its joint state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BellPair {
    pub id: u32,
    pub a: QubitRef,
    pub b: QubitRef,
    pub label: BellLabel,
    pub status: PairStatus,
    pub origin: PairOrigin,
}

impl BellPair {
    pub fn partner_of(&self, q: QubitRef) -> Option<QubitRef> {
        if q == self.a {
            Some(self.b)
        } else if q == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn touches(&self, party: Party) -> bool {
        self.a.owner == party || self.b.owner == party
    }
}

/// Everything needed to execute one contraction: which pairs merge, which
/// qubits get measured, and what survives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContractionPlan {
    pub pair_ids: (u32, u32),
    pub measured: (QubitRef, QubitRef),
    pub endpoints: (QubitRef, QubitRef),
    /// XOR of the two merged labels; the measurement outcome is XORed in
    /// once known.
    pub base_label: BellLabel,
}

/// The pair graph of one session.
#[derive(Clone, Debug)]
pub struct Topology {
    parties: u16,
    pairs: Vec<BellPair>,
    next_id: u32,
}

/// Local slot of the sender's half of feed pair `leg` (legs are 1 and 2).
pub fn feed_slot(leg: u8) -> u8 {
    leg + 1
}

impl Topology {
    /// Standard distributed layout for `parties` members.
    pub fn build(parties: u16) -> Result<Self> {
        if parties < 2 {
            return Err(Error::Config(format!(
                "the distributed layout needs at least 2 members, got {parties}"
            )));
        }
        let member = |k: u16, slot: u8| QubitRef::new(Party::Member(k), slot);
        let mut pairs = Vec::with_capacity(parties as usize + 1);
        let mut push = |a: QubitRef, b: QubitRef| {
            let id = pairs.len() as u32;
            pairs.push(BellPair {
                id,
                a,
                b,
                label: BellLabel::default(),
                status: PairStatus::Pending,
                origin: PairOrigin::Distributed,
            });
        };
        push(QubitRef::new(Party::Alice, feed_slot(1)), member(1, 0));
        push(QubitRef::new(Party::Alice, feed_slot(2)), member(2, 0));
        for k in 1..=parties.saturating_sub(2) {
            push(member(k, 1), member(k + 2, 0));
        }
        push(member(parties - 1, 1), member(parties, 1));
        let topology = Topology {
            parties,
            next_id: pairs.len() as u32,
            pairs,
        };
        topology.validate()?;
        Ok(topology)
    }

    pub fn parties(&self) -> u16 {
        self.parties
    }

    pub fn pairs(&self) -> &[BellPair] {
        &self.pairs
    }

    pub fn pair(&self, id: u32) -> Result<&BellPair> {
        self.pairs
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Precondition(format!("no pair with id {id}")))
    }

    pub fn pair_mut(&mut self, id: u32) -> Result<&mut BellPair> {
        self.pairs
            .iter_mut()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Precondition(format!("no pair with id {id}")))
    }

    /// The unconsumed pair containing `q`, if any.
    pub fn pair_containing(&self, q: QubitRef) -> Option<&BellPair> {
        self.pairs
            .iter()
            .find(|p| p.status != PairStatus::Consumed && (p.a == q || p.b == q))
    }

    /// Halves of unconsumed pairs held by `party`, in pair-id order.
    pub fn unconsumed_halves(&self, party: Party) -> Vec<QubitRef> {
        let mut out = Vec::new();
        for p in &self.pairs {
            if p.status == PairStatus::Consumed {
                continue;
            }
            if p.a.owner == party {
                out.push(p.a);
            }
            if p.b.owner == party {
                out.push(p.b);
            }
        }
        out
    }

    /// The unconsumed pair anchored at the sender's half of feed leg 1 or 2.
    pub fn feed_pair(&self, leg: u8) -> Result<&BellPair> {
        let anchor = QubitRef::new(Party::Alice, feed_slot(leg));
        self.pair_containing(anchor).ok_or_else(|| {
            Error::Precondition(format!("feed leg {leg} has no unconsumed pair"))
        })
    }

    /// Plans the contraction that merges the two unconsumed pairs held by
    /// `party`.
    pub fn contraction_plan(&self, party: Party) -> Result<ContractionPlan> {
        let halves = self.unconsumed_halves(party);
        if halves.len() != 2 {
            return Err(Error::Precondition(format!(
                "{party} holds {} unconsumed pair halves, need exactly 2 to swap",
                halves.len()
            )));
        }
        self.contraction_plan_for(halves[0], halves[1])
    }

    /// Plans a contraction given the two measured qubits explicitly; both
    /// must belong to one party and to two distinct unconsumed pairs.
    pub fn contraction_plan_for(&self, q1: QubitRef, q2: QubitRef) -> Result<ContractionPlan> {
        if q1.owner != q2.owner {
            return Err(Error::Precondition(format!(
                "swap qubits {q1} and {q2} belong to different parties"
            )));
        }
        let p1 = self
            .pair_containing(q1)
            .ok_or_else(|| Error::Precondition(format!("{q1} is not an unconsumed pair half")))?;
        let p2 = self
            .pair_containing(q2)
            .ok_or_else(|| Error::Precondition(format!("{q2} is not an unconsumed pair half")))?;
        if p1.id == p2.id {
            return Err(Error::Precondition(format!(
                "{q1} and {q2} are two halves of one pair; swapping needs two pairs"
            )));
        }
        let (first, second) = if p1.id < p2.id { (p1, p2) } else { (p2, p1) };
        let (m1, m2) = if p1.id < p2.id { (q1, q2) } else { (q2, q1) };
        let e1 = first.partner_of(m1).expect("m1 is in first");
        let e2 = second.partner_of(m2).expect("m2 is in second");
        Ok(ContractionPlan {
            pair_ids: (first.id, second.id),
            measured: (m1, m2),
            endpoints: (e1, e2),
            base_label: first.label.xor(second.label),
        })
    }

    /// Consumes the planned pairs and registers the swap product with the
    /// folded label. Returns the new pair's id.
    pub fn apply_contraction(
        &mut self,
        plan: &ContractionPlan,
        outcome: BellLabel,
        status: PairStatus,
    ) -> Result<u32> {
        if plan.endpoints.0.owner == plan.endpoints.1.owner
            && plan.endpoints.0 == plan.endpoints.1
        {
            return Err(Error::Precondition(
                "contraction would produce a degenerate pair".into(),
            ));
        }
        self.pair_mut(plan.pair_ids.0)?.status = PairStatus::Consumed;
        self.pair_mut(plan.pair_ids.1)?.status = PairStatus::Consumed;
        let id = self.next_id;
        self.next_id += 1;
        self.pairs.push(BellPair {
            id,
            a: plan.endpoints.0,
            b: plan.endpoints.1,
            label: plan.base_label.xor(outcome),
            status,
            origin: PairOrigin::SwapProduct,
        });
        Ok(id)
    }

    /// Registers an extra pair outside the distributed layout.
    pub fn add_private_pair(
        &mut self,
        a: QubitRef,
        b: QubitRef,
        label: BellLabel,
        status: PairStatus,
    ) -> Result<u32> {
        for p in &self.pairs {
            if p.status == PairStatus::Consumed {
                continue;
            }
            for q in [a, b] {
                if p.a == q || p.b == q {
                    return Err(Error::Precondition(format!(
                        "qubit {q} already belongs to pair {}",
                        p.id
                    )));
                }
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.pairs.push(BellPair {
            id,
            a,
            b,
            label,
            status,
            origin: PairOrigin::AdversaryPrivate,
        });
        Ok(id)
    }

    /// Structural invariants of the built layout: N+1 pairs, the sender on
    /// exactly the two feed pairs, every member on exactly two pairs, no
    /// two members directly sharing more than one pair, and no qubit
    /// address reused.
    pub fn validate(&self) -> Result<()> {
        let n = self.parties as usize;
        if self.pairs.len() != n + 1 {
            return Err(Error::Config(format!(
                "layout has {} pairs, expected {}",
                self.pairs.len(),
                n + 1
            )));
        }
        let mut addresses = Vec::new();
        let mut degree = vec![0usize; n + 1];
        let mut edges: Vec<(Party, Party)> = Vec::new();
        for p in &self.pairs {
            if p.a.owner == p.b.owner {
                return Err(Error::Config(format!(
                    "pair {} connects {} to itself",
                    p.id, p.a.owner
                )));
            }
            for q in [p.a, p.b] {
                if addresses.contains(&q) {
                    return Err(Error::Config(format!("qubit address {q} reused")));
                }
                if q == QubitRef::new(Party::Alice, 0) || q == QubitRef::new(Party::Alice, 1) {
                    return Err(Error::Config(format!(
                        "pair half {q} collides with a payload slot"
                    )));
                }
                addresses.push(q);
                match q.owner {
                    Party::Alice => degree[0] += 1,
                    Party::Member(k) => {
                        if k < 1 || k > self.parties {
                            return Err(Error::Config(format!(
                                "pair half {q} names a member outside 1..={}",
                                self.parties
                            )));
                        }
                        degree[k as usize] += 1;
                    }
                }
            }
            let edge = (
                p.a.owner.min(p.b.owner),
                p.a.owner.max(p.b.owner),
            );
            if edge.0 != Party::Alice && edges.contains(&edge) {
                return Err(Error::Config(format!(
                    "members {} and {} share two complete pairs",
                    edge.0, edge.1
                )));
            }
            edges.push(edge);
        }
        if degree[0] != 2 {
            return Err(Error::Config(format!(
                "the sender sits on {} pairs, expected 2",
                degree[0]
            )));
        }
        for k in 1..=n {
            if degree[k] != 2 {
                return Err(Error::Config(format!(
                    "member B{k} sits on {} pairs, expected 2",
                    degree[k]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(k: u16, slot: u8) -> QubitRef {
        QubitRef::new(Party::Member(k), slot)
    }

    fn a(slot: u8) -> QubitRef {
        QubitRef::new(Party::Alice, slot)
    }

    fn endpoints(t: &Topology) -> Vec<(QubitRef, QubitRef)> {
        t.pairs()
            .iter()
            .filter(|p| p.status != PairStatus::Consumed)
            .map(|p| (p.a, p.b))
            .collect()
    }

    #[test]
    fn two_member_layout_has_feeds_and_a_closing_pair() {
        let t = Topology::build(2).unwrap();
        assert_eq!(
            endpoints(&t),
            vec![(a(2), m(1, 0)), (a(3), m(2, 0)), (m(1, 1), m(2, 1))]
        );
    }

    #[test]
    fn three_member_layout_matches_the_documented_shape() {
        let t = Topology::build(3).unwrap();
        assert_eq!(
            endpoints(&t),
            vec![
                (a(2), m(1, 0)),
                (a(3), m(2, 0)),
                (m(1, 1), m(3, 0)),
                (m(2, 1), m(3, 1)),
            ]
        );
    }

    #[test]
    fn larger_layouts_keep_every_member_on_two_pairs() {
        for n in 2..=64 {
            let t = Topology::build(n).unwrap();
            assert_eq!(t.pairs().len(), n as usize + 1);
            t.validate().unwrap();
        }
        assert!(Topology::build(1).is_err());
    }

    #[test]
    fn tail_contraction_reproduces_the_smaller_layout() {
        let mut t = Topology::build(4).unwrap();
        let plan = t.contraction_plan(Party::Member(4)).unwrap();
        assert_eq!(plan.measured, (m(4, 0), m(4, 1)));
        t.apply_contraction(&plan, BellLabel::new(1, 0), PairStatus::Pending)
            .unwrap();
        let smaller = Topology::build(3).unwrap();
        assert_eq!(endpoints(&t), endpoints(&smaller));
        // The folded label carries the outcome.
        let product = t.pair_containing(m(2, 1)).unwrap();
        assert_eq!(product.label, BellLabel::new(1, 0));
        assert_eq!(product.origin, PairOrigin::SwapProduct);
    }

    #[test]
    fn interior_contraction_bridges_the_neighbors() {
        let mut t = Topology::build(5).unwrap();
        let plan = t.contraction_plan(Party::Member(3)).unwrap();
        // B3 holds the chain halves (B1,B3) and (B3,B5).
        assert_eq!(plan.measured, (m(3, 0), m(3, 1)));
        assert_eq!(plan.endpoints, (m(1, 1), m(5, 0)));
        t.apply_contraction(&plan, BellLabel::default(), PairStatus::Pending)
            .unwrap();
        assert!(t.pair_containing(m(3, 0)).is_none());
        let bridged = t.pair_containing(m(1, 1)).unwrap();
        assert_eq!(bridged.partner_of(m(1, 1)), Some(m(5, 0)));
    }

    #[test]
    fn swap_plans_reject_malformed_requests() {
        let t = Topology::build(3).unwrap();
        // Two halves of one pair.
        let err = t.contraction_plan_for(m(2, 1), m(3, 1)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        // Different owners.
        let err = t.contraction_plan_for(m(1, 1), m(3, 1)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        // A party with only one live half after consumption.
        let mut t = Topology::build(2).unwrap();
        t.pair_mut(0).unwrap().status = PairStatus::Consumed;
        let err = t.contraction_plan(Party::Member(1)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn duplicate_member_edges_fail_validation() {
        let mut t = Topology::build(3).unwrap();
        // Rewire the first chain pair onto the closing edge's members.
        let p = t.pair_mut(2).unwrap();
        p.a = m(2, 2);
        p.b = m(3, 2);
        let err = t.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
