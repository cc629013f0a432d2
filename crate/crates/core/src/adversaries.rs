//! Concrete Byzantine strategies. Each one controls every faulty node and is
//! built fresh for each trial.
//!
//! All direction arithmetic is done in node-local coordinates or converted
//! with the nodes' frames, so a common rotation of every frame leaves each
//! strategy's output unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical_consensus::{ConsensusRound, KingStep};
use crate::geometry::{random_direction, Direction, Frame};
use crate::netsim::{Adversary, AdversaryView, Envelope, Passive, Payload, Step};
use crate::quantum_link::{BlochState, QuantumMessage, Segment};
use crate::NodeId;

pub const HONEST_SHADOW: &str = "honest-shadow";
pub const CRASH: &str = "crash";
pub const RANDOM_NOISE: &str = "random-noise";
pub const EQUIVOCATOR: &str = "equivocator";
pub const GRADE_POISONER: &str = "grade-poisoner";
pub const RUSHER: &str = "rusher";

/// Default equivocation angle and rusher shift, radians.
pub const DEFAULT_ANGLE: f64 = std::f64::consts::FRAC_PI_2;
pub const DEFAULT_SHIFT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("unknown adversary {0:?}")]
    Unknown(String),
    #[error("{name}: parameter {param} must be finite, got {value}")]
    BadParameter { name: String, param: &'static str, value: f64 },
    #[error("faulty set has {got} nodes but t = {t}")]
    TooManyFaulty { got: usize, t: usize },
    #[error("faulty node {node} out of range for m = {m}")]
    OutOfRange { node: NodeId, m: usize },
}

/// Strategy name plus its parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub name: String,
    /// Equivocator: angle between the two king clusters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    /// Rusher: rotation applied to copied directions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

impl AdversarySpec {
    pub fn named(name: &str) -> Self {
        AdversarySpec { name: name.to_string(), angle: None, shift: None }
    }

    pub fn equivocator(angle: f64) -> Self {
        AdversarySpec { angle: Some(angle), ..Self::named(EQUIVOCATOR) }
    }

    pub fn rusher(shift: f64) -> Self {
        AdversarySpec { shift: Some(shift), ..Self::named(RUSHER) }
    }

    /// Short label for reports, including parameters.
    pub fn label(&self) -> String {
        match (self.angle, self.shift) {
            (Some(a), _) if self.name == EQUIVOCATOR => format!("{}({a:.6})", self.name),
            (_, Some(s)) if self.name == RUSHER => format!("{}({s:.6})", self.name),
            _ => self.name.clone(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Adversary>, AdversaryError> {
        let param = |param: &'static str, v: Option<f64>, default: f64| {
            let value = v.unwrap_or(default);
            if value.is_finite() {
                Ok(value)
            } else {
                Err(AdversaryError::BadParameter { name: self.name.clone(), param, value })
            }
        };
        Ok(match self.name.as_str() {
            HONEST_SHADOW => Box::new(Passive),
            CRASH => Box::new(Crash),
            RANDOM_NOISE => Box::new(RandomNoise),
            EQUIVOCATOR => Box::new(Equivocator { angle: param("angle", self.angle, DEFAULT_ANGLE)? }),
            GRADE_POISONER => Box::new(GradePoisoner),
            RUSHER => Box::new(Rusher { shift: param("shift", self.shift, DEFAULT_SHIFT)? }),
            other => return Err(AdversaryError::Unknown(other.to_string())),
        })
    }
}

/// Every strategy with default parameters.
pub fn strategy_catalog() -> Vec<AdversarySpec> {
    [HONEST_SHADOW, CRASH, RANDOM_NOISE, EQUIVOCATOR, GRADE_POISONER, RUSHER]
        .into_iter()
        .map(AdversarySpec::named)
        .collect()
}

/// Faulty mask for explicit ids, or nodes `0..t` (the first `t` kings) when
/// none are given.
pub fn faulty_mask(m: usize, t: usize, ids: Option<&[NodeId]>) -> Result<Vec<bool>, AdversaryError> {
    let default: Vec<NodeId> = (0..t).collect();
    let ids = ids.unwrap_or(&default);
    let mut mask = vec![false; m];
    for &id in ids {
        if id >= m {
            return Err(AdversaryError::OutOfRange { node: id, m });
        }
        mask[id] = true;
    }
    let got = mask.iter().filter(|&&f| f).count();
    if got > t {
        return Err(AdversaryError::TooManyFaulty { got, t });
    }
    Ok(mask)
}

fn correct_nodes(view: &AdversaryView<'_>) -> Vec<NodeId> {
    (0..view.m()).filter(|&i| !view.is_faulty(i)).collect()
}

/// Position of `r` among correct nodes is in the first (larger) half.
fn first_half(view: &AdversaryView<'_>, r: NodeId) -> bool {
    let correct = correct_nodes(view);
    let split = correct.len().div_ceil(2);
    correct.iter().position(|&c| c == r).is_none_or(|p| p < split)
}

fn quantum(d: Direction, view: &AdversaryView<'_>) -> Payload {
    Payload::Quantum(QuantumMessage::honest(d, view.channel.n))
}

fn classical_step(step: Step) -> Option<KingStep> {
    match step {
        Step::ConsensusRound(i) => Some(ConsensusRound::from_index(i).step),
        _ => None,
    }
}

/// Re-expresses a sender-local message in another node's frame.
fn reframe(msg: &QuantumMessage, from: &Frame, to: &Frame) -> QuantumMessage {
    QuantumMessage {
        segments: msg
            .segments
            .iter()
            .map(|s| Segment { state: s.state.to_global(from).to_local(to), count: s.count })
            .collect(),
    }
}

fn rotate_message(msg: &QuantumMessage, angle: f64) -> QuantumMessage {
    QuantumMessage {
        segments: msg
            .segments
            .iter()
            .map(|s| {
                let state = match Direction::normalize(s.state.vector()) {
                    Ok(d) => {
                        let len = s.state.vector().norm();
                        let turned = d.rotate_about(d.any_orthogonal(), angle);
                        BlochState::new(turned.vec() * len).unwrap_or(s.state)
                    }
                    Err(_) => s.state,
                };
                Segment { state, count: s.count }
            })
            .collect(),
    }
}

/// Faulty nodes never send anything.
pub struct Crash;

impl Adversary for Crash {
    fn name(&self) -> &str {
        CRASH
    }

    fn act(&mut self, _view: &AdversaryView<'_>, _rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        vec![]
    }
}

/// Independent uniform garbage in every slot: random directions on quantum
/// rounds, and 0, 1 or nothing on classical rounds.
pub struct RandomNoise;

impl Adversary for RandomNoise {
    fn name(&self) -> &str {
        RANDOM_NOISE
    }

    fn act(&mut self, view: &AdversaryView<'_>, rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        view.slots
            .iter()
            .map(|&(sender, receiver)| {
                let payload = if view.round.step.is_quantum() {
                    quantum(random_direction(rng), view)
                } else {
                    match rng.random_range(0..3) {
                        0 => Payload::Bit(false),
                        1 => Payload::Bit(true),
                        _ => Payload::Absent,
                    }
                };
                Envelope { sender, receiver, payload }
            })
            .collect()
    }
}

/// A faulty king splits the correct nodes into two clusters separated by
/// `angle`. Faulty non-kings echo each receiver's own direction back to it,
/// claim success in weak consensus and split their classical votes along the
/// same halves.
pub struct Equivocator {
    pub angle: f64,
}

impl Adversary for Equivocator {
    fn name(&self) -> &str {
        EQUIVOCATOR
    }

    fn act(&mut self, view: &AdversaryView<'_>, rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        let step = view.round.step;
        let u = random_direction(rng);
        let u2 = u.rotate_about(u.any_orthogonal(), self.angle);
        view.slots
            .iter()
            .map(|&(sender, receiver)| {
                let half = first_half(view, receiver);
                let payload = match step {
                    Step::KingBroadcast => quantum(if half { u } else { u2 }, view),
                    Step::DirectionExchange => mirror(view, sender, receiver)
                        .unwrap_or_else(|| quantum(if half { u } else { u2 }, view)),
                    Step::FlagExchange => Payload::Bit(true),
                    Step::ConsensusRound(_) => Payload::Bit(half),
                };
                Envelope { sender, receiver, payload }
            })
            .collect()
    }
}

/// Sends `receiver` its own current direction, read off its outgoing honest
/// traffic and converted into the sender's frame.
fn mirror(view: &AdversaryView<'_>, sender: NodeId, receiver: NodeId) -> Option<Payload> {
    let own = view
        .honest
        .iter()
        .find(|e| e.sender == receiver && matches!(e.payload, Payload::Quantum(_)))?;
    let Payload::Quantum(msg) = &own.payload else { return None };
    Some(Payload::Quantum(reframe(msg, &view.frames[receiver], &view.frames[sender])))
}

/// Follows the protocol on quantum rounds, always raises the weak-consensus
/// flag, votes grade 1 and sends conflicting proposals and king bits to even
/// and odd receivers.
pub struct GradePoisoner;

impl Adversary for GradePoisoner {
    fn name(&self) -> &str {
        GRADE_POISONER
    }

    fn act(&mut self, view: &AdversaryView<'_>, _rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        view.slots
            .iter()
            .map(|&(sender, receiver)| {
                let even = receiver % 2 == 0;
                let payload = match view.round.step {
                    Step::FlagExchange => Payload::Bit(true),
                    step => match classical_step(step) {
                        Some(KingStep::Vote) => Payload::Bit(true),
                        Some(KingStep::Propose | KingStep::King) => Payload::Bit(even),
                        None => view
                            .shadow_to(sender, receiver)
                            .map_or(Payload::Absent, |e| e.payload.clone()),
                    },
                };
                Envelope { sender, receiver, payload }
            })
            .collect()
    }
}

/// Copies the lowest-id correct node's current-round messages. Copied
/// directions are turned by `shift`; as king it sends a random direction to
/// even receivers and the same direction turned by `shift` to odd ones.
pub struct Rusher {
    pub shift: f64,
}

impl Adversary for Rusher {
    fn name(&self) -> &str {
        RUSHER
    }

    fn act(&mut self, view: &AdversaryView<'_>, rng: &mut ChaCha8Rng) -> Vec<Envelope> {
        let Some(&target) = correct_nodes(view).first() else { return vec![] };
        let d = random_direction(rng);
        view.slots
            .iter()
            .map(|&(sender, receiver)| {
                // the target never sends to itself; copy what it sent the next node
                let via = if receiver == target { (target + 1) % view.m() } else { receiver };
                let payload = match (view.round.step, view.honest_to(target, via)) {
                    (Step::KingBroadcast, _) => {
                        let turn = if receiver % 2 == 0 { 0.0 } else { self.shift };
                        quantum(d.rotate_about(d.any_orthogonal(), turn), view)
                    }
                    (_, Some(env)) => match &env.payload {
                        Payload::Quantum(msg) => Payload::Quantum(rotate_message(
                            &reframe(msg, &view.frames[target], &view.frames[sender]),
                            self.shift,
                        )),
                        other => other.clone(),
                    },
                    (_, None) => view
                        .shadow_to(sender, receiver)
                        .map_or(Payload::Absent, |e| e.payload.clone()),
                };
                Envelope { sender, receiver, payload }
            })
            .collect()
    }
}
