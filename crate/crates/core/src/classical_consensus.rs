//! Binary consensus for `t < m/3` Byzantine nodes: phase king with three
//! rounds per phase (vote, propose, king).
//!
//! Phase `p` (1-based) is arbitrated by node `p − 1`. After `t + 1` phases at
//! least one king was correct, which forces agreement; a value held by every
//! correct node is locked in by the `m − t` proposal quorum, which gives
//! validity.
//!
//! Missing votes and missing king bits count as `0`. A missing proposal is
//! "no proposal".

use serde::{Deserialize, Serialize};

use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KingStep {
    Vote,
    Propose,
    King,
}

/// Position inside the consensus schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConsensusRound {
    /// 1-based phase.
    pub phase: u32,
    pub step: KingStep,
}

impl ConsensusRound {
    pub fn from_index(index: u32) -> Self {
        let step = match index % 3 {
            0 => KingStep::Vote,
            1 => KingStep::Propose,
            _ => KingStep::King,
        };
        ConsensusRound { phase: index / 3 + 1, step }
    }

    pub fn king(&self) -> NodeId {
        (self.phase - 1) as NodeId
    }
}

/// Communication rounds for fault bound `t`.
pub fn total_rounds(t: usize) -> u32 {
    3 * (t as u32 + 1)
}

/// What a node puts on the wire in one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outgoing {
    /// Same message to every other node; `None` is an empty slot.
    Broadcast(Option<bool>),
    /// Not a sender this round.
    Silent,
}

#[derive(Clone, Debug)]
pub struct PhaseKing {
    id: NodeId,
    m: usize,
    t: usize,
    value: bool,
    proposal: Option<bool>,
    strong: bool,
}

impl PhaseKing {
    pub fn new(id: NodeId, m: usize, t: usize, input: bool) -> Self {
        assert!(3 * t < m, "phase king needs t < m/3");
        assert!(id < m);
        PhaseKing { id, m, t, value: input, proposal: None, strong: false }
    }

    pub fn value(&self) -> bool {
        self.value
    }

    pub fn outgoing(&self, round: ConsensusRound) -> Outgoing {
        match round.step {
            KingStep::Vote => Outgoing::Broadcast(Some(self.value)),
            KingStep::Propose => Outgoing::Broadcast(self.proposal),
            KingStep::King if round.king() == self.id => Outgoing::Broadcast(Some(self.value)),
            KingStep::King => Outgoing::Silent,
        }
    }

    /// `incoming[j]` is what node `j` sent this node; the entry for this
    /// node itself is ignored.
    pub fn receive(&mut self, round: ConsensusRound, incoming: &[Option<bool>]) {
        assert_eq!(incoming.len(), self.m);
        let quorum = self.m - self.t;
        match round.step {
            KingStep::Vote => {
                let ones = self.count(incoming, Some(self.value), |b| b == Some(true));
                let zeros = self.m - ones;
                self.proposal = if ones >= quorum {
                    Some(true)
                } else if zeros >= quorum {
                    Some(false)
                } else {
                    None
                };
            }
            KingStep::Propose => {
                let ones = self.count(incoming, self.proposal, |b| b == Some(true));
                let zeros = self.count(incoming, self.proposal, |b| b == Some(false));
                let (best, support) = if ones >= zeros { (true, ones) } else { (false, zeros) };
                if support > self.t {
                    self.value = best;
                    self.strong = support >= quorum;
                } else {
                    self.strong = false;
                }
            }
            KingStep::King => {
                let king = round.king();
                if !self.strong && king != self.id {
                    self.value = incoming[king].unwrap_or(false);
                }
            }
        }
    }

    fn count(&self, incoming: &[Option<bool>], own: Option<bool>, pred: impl Fn(Option<bool>) -> bool) -> usize {
        incoming
            .iter()
            .enumerate()
            .map(|(j, &b)| if j == self.id { own } else { b })
            .filter(|&b| pred(b))
            .count()
    }
}

/// Runs the whole protocol in memory. `faulty_msg(round_index, sender,
/// receiver)` supplies every message sent by a faulty node. Returns each
/// correct node's output (`None` for faulty nodes).
pub fn simulate(
    m: usize,
    t: usize,
    inputs: &[bool],
    faulty: &[bool],
    mut faulty_msg: impl FnMut(u32, NodeId, NodeId) -> Option<bool>,
) -> Vec<Option<bool>> {
    assert_eq!(inputs.len(), m);
    assert_eq!(faulty.len(), m);
    let mut nodes: Vec<PhaseKing> =
        (0..m).map(|i| PhaseKing::new(i, m, t, inputs[i])).collect();
    for index in 0..total_rounds(t) {
        let round = ConsensusRound::from_index(index);
        // mailbox[receiver][sender]
        let mut mailbox = vec![vec![None; m]; m];
        for sender in 0..m {
            let out = nodes[sender].outgoing(round);
            for (receiver, inbox) in mailbox.iter_mut().enumerate() {
                if receiver == sender {
                    continue;
                }
                inbox[sender] = if faulty[sender] {
                    faulty_msg(index, sender, receiver)
                } else {
                    match out {
                        Outgoing::Broadcast(b) => b,
                        Outgoing::Silent => None,
                    }
                };
            }
        }
        for (node, inbox) in nodes.iter_mut().zip(&mailbox) {
            node.receive(round, inbox);
        }
    }
    nodes
        .iter()
        .zip(faulty)
        .map(|(n, &f)| (!f).then_some(n.value()))
        .collect()
}
