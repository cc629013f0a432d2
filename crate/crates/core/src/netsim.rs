//! Synchronous round engine over a complete graph.
//!
//! Channels are public (the adversary reads the whole transcript, including
//! the current round's honest traffic before it speaks), authenticated (the
//! engine stamps senders; faulty nodes cannot inject on behalf of correct
//! ones) and synchronous (an empty slot is delivered as [`Received::Absent`]).
//!
//! Quantum payloads carry Bloch segments in the *sender's* local frame. The
//! engine maps them to global coordinates with the sender's frame, applies the
//! depolarizing channel and measures in the receiver's frame at delivery.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical_consensus::{self, ConsensusRound, KingStep};
use crate::geometry::Frame;
use crate::quantum_link::{measure_batch, ChannelParams, MeasurementTally, QuantumMessage};
use crate::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("adversary sent as correct node {0}")]
    ForgedSender(NodeId),
    #[error("no slot {sender} -> {receiver} in this round")]
    UnexpectedSlot { sender: NodeId, receiver: NodeId },
    #[error("slot {sender} -> {receiver} filled twice")]
    DuplicateSlot { sender: NodeId, receiver: NodeId },
    #[error("network needs one frame per node ({frames} frames, {nodes} nodes)")]
    FrameCount { frames: usize, nodes: usize },
}

/// Step inside one king phase, in schedule order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    KingBroadcast,
    DirectionExchange,
    FlagExchange,
    ConsensusRound(u32),
}

impl Step {
    pub fn is_quantum(self) -> bool {
        matches!(self, Step::KingBroadcast | Step::DirectionExchange)
    }

    fn code(self) -> u64 {
        match self {
            Step::KingBroadcast => 0,
            Step::DirectionExchange => 1,
            Step::FlagExchange => 2,
            Step::ConsensusRound(i) => 3 + i as u64,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::KingBroadcast => f.write_str("king_broadcast"),
            Step::DirectionExchange => f.write_str("direction_exchange"),
            Step::FlagExchange => f.write_str("flag_exchange"),
            Step::ConsensusRound(i) => write!(f, "consensus_round:{i}"),
        }
    }
}

impl FromStr for Step {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "king_broadcast" => Ok(Step::KingBroadcast),
            "direction_exchange" => Ok(Step::DirectionExchange),
            "flag_exchange" => Ok(Step::FlagExchange),
            _ => s
                .strip_prefix("consensus_round:")
                .and_then(|i| i.parse().ok())
                .map(Step::ConsensusRound)
                .ok_or_else(|| format!("unknown step {s:?}")),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoundSchedule {
    /// 1-based king phase.
    pub phase: u32,
    pub step: Step,
}

/// The fixed step order of one king phase for fault bound `t`.
pub fn king_phase_steps(t: usize) -> Vec<Step> {
    let mut steps = vec![Step::KingBroadcast, Step::DirectionExchange, Step::FlagExchange];
    steps.extend((0..classical_consensus::total_rounds(t)).map(Step::ConsensusRound));
    steps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Quantum(QuantumMessage),
    Bit(bool),
    Absent,
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Quantum(_) => "quantum",
            Payload::Bit(_) => "bit",
            Payload::Absent => "absent",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Payload,
}

/// What a receiver sees in one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Received {
    Tally(MeasurementTally),
    Bit(bool),
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptEntry {
    pub round: RoundSchedule,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Payload,
    pub tally: Option<MeasurementTally>,
}

/// Append-only log of every slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn round(&self, round: RoundSchedule) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(move |e| e.round == round)
    }
}

/// Domain tags for [`SeedTree::stream`].
pub mod stream_tags {
    pub const TRIAL: u64 = 1;
    pub const FRAMES: u64 = 2;
    pub const KING_DIRECTION: u64 = 3;
    pub const LINK: u64 = 4;
    pub const ADVERSARY: u64 = 5;
}

/// Counter-based seed derivation: a stream is a pure function of the root
/// seed and a tag path, so consumers never perturb each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn derive(&self, path: &[u64]) -> u64 {
        path.iter()
            .fold(splitmix64(self.root), |h, &tag| splitmix64(h ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))))
    }

    pub fn stream(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(path))
    }

    pub fn child(&self, path: &[u64]) -> SeedTree {
        SeedTree::new(self.derive(path))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a rushing adversary may look at before filling faulty slots.
pub struct AdversaryView<'a> {
    pub round: RoundSchedule,
    /// King of the current king phase.
    pub king: NodeId,
    pub channel: ChannelParams,
    pub frames: &'a [Frame],
    pub faulty: &'a [bool],
    pub transcript: &'a Transcript,
    /// Current-round envelopes of correct senders.
    pub honest: &'a [Envelope],
    /// What the faulty nodes would send if they followed the protocol.
    pub shadow: &'a [Envelope],
    /// Slots the adversary is expected to fill.
    pub slots: &'a [(NodeId, NodeId)],
}

impl AdversaryView<'_> {
    pub fn m(&self) -> usize {
        self.frames.len()
    }

    pub fn is_faulty(&self, node: NodeId) -> bool {
        self.faulty[node]
    }

    pub fn honest_to(&self, sender: NodeId, receiver: NodeId) -> Option<&Envelope> {
        self.honest.iter().find(|e| e.sender == sender && e.receiver == receiver)
    }

    pub fn shadow_to(&self, sender: NodeId, receiver: NodeId) -> Option<&Envelope> {
        self.shadow.iter().find(|e| e.sender == sender && e.receiver == receiver)
    }
}

/// Joint strategy for all faulty nodes.
pub trait Adversary: Send {
    fn name(&self) -> &str;

    /// Envelopes for faulty senders. Unfilled slots are delivered as absent.
    fn act(&mut self, view: &AdversaryView<'_>, rng: &mut ChaCha8Rng) -> Vec<Envelope>;
}

/// Adversary that lets faulty nodes follow the protocol.
pub struct Passive;

impl Adversary for Passive {
    fn name(&self) -> &str {
        "honest-shadow"
    }

    fn act(&mut self, view: &AdversaryView<'_>, _rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        view.shadow.to_vec()
    }
}

/// `inboxes[receiver][sender]`.
pub type Inboxes = Vec<Vec<Received>>;

pub struct Network {
    frames: Vec<Frame>,
    faulty: Vec<bool>,
    channel: ChannelParams,
    seeds: SeedTree,
    transcript: Transcript,
}

impl Network {
    pub fn new(
        frames: Vec<Frame>,
        faulty: Vec<bool>,
        channel: ChannelParams,
        seeds: SeedTree,
    ) -> Result<Self, NetError> {
        if frames.len() != faulty.len() {
            return Err(NetError::FrameCount { frames: frames.len(), nodes: faulty.len() });
        }
        Ok(Network { frames, faulty, channel, seeds, transcript: Transcript::default() })
    }

    pub fn m(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn faulty(&self) -> &[bool] {
        &self.faulty
    }

    pub fn channel(&self) -> ChannelParams {
        self.channel
    }

    pub fn seeds(&self) -> SeedTree {
        self.seeds
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    /// Slots that must be present in `round`, ordered by (sender, receiver).
    pub fn required_slots(&self, round: RoundSchedule, king: NodeId) -> Vec<(NodeId, NodeId)> {
        let m = self.m();
        let only_from = match round.step {
            Step::KingBroadcast => Some(king),
            Step::ConsensusRound(i) => {
                let r = ConsensusRound::from_index(i);
                (r.step == KingStep::King).then(|| r.king())
            }
            _ => None,
        };
        (0..m)
            .filter(|s| only_from.is_none_or(|k| k == *s))
            .flat_map(|s| (0..m).filter(move |&r| r != s).map(move |r| (s, r)))
            .collect()
    }

    /// Runs one synchronous round. `outbox` holds the protocol-following
    /// envelopes of every node; those of faulty senders are handed to the
    /// adversary as its shadow and replaced by whatever it returns.
    pub fn run_round(
        &mut self,
        round: RoundSchedule,
        king: NodeId,
        outbox: Vec<Envelope>,
        adversary: &mut dyn Adversary,
    ) -> Result<Inboxes, NetError> {
        let m = self.m();
        let slots = self.required_slots(round, king);
        let slot_index = |s: NodeId, r: NodeId| slots.binary_search(&(s, r)).ok();

        let (shadow, honest): (Vec<Envelope>, Vec<Envelope>) =
            outbox.into_iter().partition(|e| self.faulty[e.sender]);

        let mut filled: Vec<Option<Payload>> = vec![None; slots.len()];
        for env in &honest {
            let idx = slot_index(env.sender, env.receiver).ok_or(NetError::UnexpectedSlot {
                sender: env.sender,
                receiver: env.receiver,
            })?;
            if filled[idx].is_some() {
                return Err(NetError::DuplicateSlot { sender: env.sender, receiver: env.receiver });
            }
            filled[idx] = Some(env.payload.clone());
        }

        let faulty_slots: Vec<(NodeId, NodeId)> =
            slots.iter().copied().filter(|&(s, _)| self.faulty[s]).collect();
        let forged = {
            let view = AdversaryView {
                round,
                king,
                channel: self.channel,
                frames: &self.frames,
                faulty: &self.faulty,
                transcript: &self.transcript,
                honest: &honest,
                shadow: &shadow,
                slots: &faulty_slots,
            };
            let mut rng = self.seeds.stream(&[
                stream_tags::ADVERSARY,
                round.phase as u64,
                round.step.code(),
            ]);
            adversary.act(&view, &mut rng)
        };
        for env in forged {
            if env.sender >= m || !self.faulty[env.sender] {
                return Err(NetError::ForgedSender(env.sender));
            }
            let idx = slot_index(env.sender, env.receiver).ok_or(NetError::UnexpectedSlot {
                sender: env.sender,
                receiver: env.receiver,
            })?;
            if filled[idx].is_some() {
                return Err(NetError::DuplicateSlot { sender: env.sender, receiver: env.receiver });
            }
            filled[idx] = Some(env.payload);
        }

        let mut inboxes = vec![vec![Received::Absent; m]; m];
        for (&(sender, receiver), payload) in slots.iter().zip(filled) {
            let payload = payload.unwrap_or(Payload::Absent);
            let (received, tally) = self.deliver(round, sender, receiver, &payload);
            inboxes[receiver][sender] = received;
            self.transcript.entries.push(TranscriptEntry { round, sender, receiver, payload, tally });
        }
        Ok(inboxes)
    }

    fn deliver(
        &self,
        round: RoundSchedule,
        sender: NodeId,
        receiver: NodeId,
        payload: &Payload,
    ) -> (Received, Option<MeasurementTally>) {
        match (round.step.is_quantum(), payload) {
            (true, Payload::Quantum(msg)) => {
                let mut rng = self.seeds.stream(&[
                    stream_tags::LINK,
                    round.phase as u64,
                    round.step.code(),
                    sender as u64,
                    receiver as u64,
                ]);
                match deliver_quantum(
                    msg,
                    &self.frames[sender],
                    &self.frames[receiver],
                    &self.channel,
                    &mut rng,
                ) {
                    Some(t) => (Received::Tally(t), Some(t)),
                    None => (Received::Absent, None),
                }
            }
            (false, Payload::Bit(b)) => (Received::Bit(*b), None),
            _ => (Received::Absent, None),
        }
    }
}

/// Carries a sender-local quantum message through the channel and measures it
/// in the receiver's frame. Malformed messages are delivered as nothing.
pub fn deliver_quantum(
    msg: &QuantumMessage,
    sender_frame: &Frame,
    receiver_frame: &Frame,
    channel: &ChannelParams,
    rng: &mut ChaCha8Rng,
) -> Option<MeasurementTally> {
    msg.validate(channel.n).ok()?;
    measure_batch(&msg.to_global(sender_frame), receiver_frame, channel, rng).ok()
}
