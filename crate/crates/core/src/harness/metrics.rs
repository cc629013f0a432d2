//! Per-trial metrics, all in global coordinates.

use serde::{Deserialize, Serialize};

use crate::geometry::{distance, to_frame, Direction, Frame};
use crate::netsim::{Payload, Transcript};
use crate::quantum_link::{ted_receive, MeasurementTally};
use crate::rf_protocols::{ConsensusOutcome, ProtocolParams};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeOutput {
    pub direction: Direction,
    /// King phase in which the node accepted.
    pub phase: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: u32,
    pub king: NodeId,
    pub king_faulty: bool,
    /// What a correct king broadcast.
    pub king_direction: Option<Direction>,
    /// No correct node had accepted before this phase.
    pub fresh: bool,
    /// Per-node phase output; `None` is ⊥ or a faulty node.
    pub outputs: Vec<Option<Direction>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Persistency {
    pub phase: u32,
    /// Every correct node accepted in this phase.
    pub all_accepted: bool,
    /// Largest distance from a correct output to the king's direction.
    pub max_distance: Option<f64>,
    pub ok: bool,
}

/// Honest-to-honest quantum links judged against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAudit {
    pub honest_links: u32,
    pub failures: u32,
    pub degenerate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub eta_emp: f64,
    pub all_bottom: bool,
    pub consistency_ok: bool,
    pub terminated: bool,
    pub phases_used: u32,
    /// Per phase: all correct outputs ⊥, or all accepted and pairwise close.
    pub king_consistency: Vec<bool>,
    /// Honest-king phases that started with nobody decided.
    pub persistency: Vec<Persistency>,
    pub links: LinkAudit,
    pub violation: bool,
}

impl TrialMetrics {
    /// Every honest link estimate landed within `δ_eff`.
    pub fn clean(&self) -> bool {
        self.links.failures == 0
    }

    pub fn persistency_ok(&self) -> bool {
        self.persistency.iter().all(|p| p.ok)
    }

    /// A property failed although every estimate succeeded.
    pub fn conditional_violation(&self) -> bool {
        self.clean() && self.violation
    }
}

/// Largest pairwise distance among the given directions (0 for fewer than
/// two).
pub fn max_pairwise(dirs: &[Direction]) -> f64 {
    let mut eta = 0.0f64;
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[i + 1..] {
            eta = eta.max(distance(*a, *b));
        }
    }
    eta
}

/// Converts the protocol's local-frame outcome to global coordinates.
pub fn globalize(outcome: &ConsensusOutcome, frames: &[Frame]) -> (Vec<Option<NodeOutput>>, Vec<PhaseSummary>) {
    let outputs = outcome
        .outputs
        .iter()
        .zip(frames)
        .map(|(o, f)| o.map(|d| NodeOutput { direction: f.to_global(d.direction), phase: d.phase }))
        .collect();
    let phases = outcome
        .phases
        .iter()
        .map(|p| PhaseSummary {
            phase: p.phase,
            king: p.king,
            king_faulty: p.king_faulty,
            king_direction: p.king_direction.map(|d| frames[p.king].to_global(d)),
            fresh: p.fresh,
            outputs: p.outputs.iter().zip(frames).map(|(o, f)| o.map(|d| f.to_global(d))).collect(),
        })
        .collect();
    (outputs, phases)
}

/// One quantum slot, as logged.
pub struct LinkObservation<'a> {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: &'a Payload,
    pub tally: Option<&'a MeasurementTally>,
}

/// Direction of an honest single-state message, in the sender's frame.
pub fn sent_direction(payload: &Payload) -> Option<Direction> {
    match payload {
        Payload::Quantum(msg) => match msg.segments.as_slice() {
            [seg] => Direction::normalize(seg.state.vector()).ok(),
            _ => None,
        },
        _ => None,
    }
}

/// Labels every correct-to-correct quantum link as success or failure
/// against `δ_eff`, using the true frames.
pub fn audit_links<'a>(
    params: &ProtocolParams,
    frames: &[Frame],
    faulty: &[bool],
    links: impl IntoIterator<Item = LinkObservation<'a>>,
) -> LinkAudit {
    let tol = params.delta_eff();
    let mut audit = LinkAudit::default();
    for link in links {
        if faulty[link.sender] || faulty[link.receiver] {
            continue;
        }
        let (Some(sent), Some(tally)) = (sent_direction(link.payload), link.tally) else {
            continue;
        };
        audit.honest_links += 1;
        let est = ted_receive(tally);
        let truth = to_frame(sent, &frames[link.sender], &frames[link.receiver]);
        audit.degenerate += est.degenerate as u32;
        if est.degenerate || distance(est.direction, truth) > tol {
            audit.failures += 1;
        }
    }
    audit
}

pub fn transcript_links(transcript: &Transcript) -> impl Iterator<Item = LinkObservation<'_>> {
    transcript.entries().iter().filter(|e| e.round.step.is_quantum()).map(|e| LinkObservation {
        sender: e.sender,
        receiver: e.receiver,
        payload: &e.payload,
        tally: e.tally.as_ref(),
    })
}

/// Metrics from global outputs plus a link audit.
pub fn evaluate(
    params: &ProtocolParams,
    faulty: &[bool],
    outputs: &[Option<NodeOutput>],
    phases: &[PhaseSummary],
    links: LinkAudit,
) -> TrialMetrics {
    let eta_radius = params.consistency_radius();
    let correct = || (0..faulty.len()).filter(|&i| !faulty[i]);

    let accepted: Vec<Direction> = correct().filter_map(|i| outputs[i].map(|o| o.direction)).collect();
    let eta_emp = max_pairwise(&accepted);
    let all_bottom = accepted.is_empty();
    let consistency_ok = all_bottom || eta_emp <= eta_radius;
    let terminated = correct().all(|i| outputs[i].is_some());
    let phases_used = if terminated {
        correct().filter_map(|i| outputs[i].map(|o| o.phase)).max().unwrap_or(0)
    } else {
        phases.len() as u32
    };

    let king_consistency: Vec<bool> = phases
        .iter()
        .map(|p| {
            let outs: Vec<Option<Direction>> = correct().map(|i| p.outputs[i]).collect();
            let dirs: Vec<Direction> = outs.iter().flatten().copied().collect();
            dirs.is_empty() || (dirs.len() == outs.len() && max_pairwise(&dirs) <= eta_radius)
        })
        .collect();

    let persistency: Vec<Persistency> = phases
        .iter()
        .filter(|p| p.fresh)
        .filter_map(|p| {
            let king = p.king_direction?;
            let dists: Vec<Option<f64>> = correct().map(|i| p.outputs[i].map(|d| distance(d, king))).collect();
            let all_accepted = dists.iter().all(Option::is_some);
            let max_distance = dists.iter().flatten().copied().reduce(f64::max);
            let ok = all_accepted && max_distance.is_none_or(|d| d <= params.delta_eff());
            Some(Persistency { phase: p.phase, all_accepted, max_distance, ok })
        })
        .collect();

    let violation = !consistency_ok
        || !terminated
        || king_consistency.iter().any(|&k| !k)
        || persistency.iter().any(|p| !p.ok);
    TrialMetrics {
        eta_emp,
        all_bottom,
        consistency_ok,
        terminated,
        phases_used,
        king_consistency,
        persistency,
        links,
        violation,
    }
}

/// Metrics straight from an in-memory run.
pub fn compute_metrics(
    params: &ProtocolParams,
    frames: &[Frame],
    faulty: &[bool],
    outcome: &ConsensusOutcome,
    transcript: &Transcript,
) -> TrialMetrics {
    let (outputs, phases) = globalize(outcome, frames);
    let links = audit_links(params, frames, faulty, transcript_links(transcript));
    evaluate(params, faulty, &outputs, &phases, links)
}
