//! Independent re-derivation of trial outcomes from an exported transcript
//! and the recorded ground truth.
//!
//! Each correct node's decisions are recomputed from the tallies and bits it
//! received, using the pure weak/graded consensus functions and a fresh
//! phase-king instance per phase. The result is compared against what the
//! run recorded.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{audit_links, max_pairwise, LinkAudit, LinkObservation, NodeOutput};
use super::{read_jsonl, HarnessError, Summary, TranscriptRecord, TrialRecord};
use super::{SUMMARY_FILE, TRANSCRIPT_FILE, TRIALS_FILE};
use crate::classical_consensus::{total_rounds, ConsensusRound, Outgoing, PhaseKing};
use crate::geometry::{distance, Direction};
use crate::netsim::{king_phase_steps, Payload, Step};
use crate::quantum_link::{ted_receive, ChannelParams, QuantumMessage};
use crate::rf_protocols::{graded_consensus, weak_consensus, ProtocolParams};
use crate::NodeId;

/// Agreement tolerance for directions that went through a frame round trip.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub trial: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    /// Trials whose replayed `consistency_ok` equals the recorded one.
    pub consistency_agree: usize,
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.consistency_agree == self.trials
    }
}

pub fn params_from_summary(s: &Summary) -> Result<ProtocolParams, HarnessError> {
    let channel = ChannelParams::new(s.epsilon, s.n).map_err(super::ConfigError::from)?;
    Ok(ProtocolParams::new(s.m, s.t, s.delta, channel).map_err(super::ConfigError::from)?)
}

/// Verifies an output directory written with transcripts enabled.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport, HarnessError> {
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let params = params_from_summary(&summary)?;
    let records: Vec<TrialRecord> = read_jsonl(&dir.join(TRIALS_FILE))?;
    let transcript: Vec<TranscriptRecord> = read_jsonl(&dir.join(TRANSCRIPT_FILE))?;
    Ok(verify(&params, &records, &transcript))
}

pub fn verify(params: &ProtocolParams, records: &[TrialRecord], transcript: &[TranscriptRecord]) -> VerifyReport {
    let mut by_trial: HashMap<u64, Vec<&TranscriptRecord>> = HashMap::new();
    for e in transcript {
        by_trial.entry(e.trial).or_default().push(e);
    }
    let mut report = VerifyReport { trials: records.len(), ..Default::default() };
    for record in records {
        let entries = by_trial.remove(&record.trial).unwrap_or_default();
        let replayed = replay_trial(params, record, &entries);
        let mut issue = |detail: String| report.mismatches.push(Mismatch { trial: record.trial, detail });
        for d in &replayed.issues {
            issue(d.clone());
        }
        for (i, (a, b)) in replayed.outputs.iter().zip(&record.outputs).enumerate() {
            if !same_output(a, b) {
                issue(format!("node {i}: replayed output {a:?}, recorded {b:?}"));
            }
        }
        if replayed.links != record.metrics.links {
            issue(format!("link audit {:?}, recorded {:?}", replayed.links, record.metrics.links));
        }
        if replayed.consistency_ok == record.metrics.consistency_ok {
            report.consistency_agree += 1;
        } else {
            issue(format!(
                "consistency_ok replayed {}, recorded {}",
                replayed.consistency_ok, record.metrics.consistency_ok
            ));
        }
    }
    for trial in by_trial.keys() {
        report.mismatches.push(Mismatch { trial: *trial, detail: "transcript without trial record".into() });
    }
    report.mismatches.sort_by_key(|m| m.trial);
    report
}

fn same_output(a: &Option<NodeOutput>, b: &Option<NodeOutput>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => a.phase == b.phase && distance(a.direction, b.direction) <= REPLAY_TOLERANCE,
        _ => false,
    }
}

pub struct Replayed {
    pub outputs: Vec<Option<NodeOutput>>,
    pub links: LinkAudit,
    pub consistency_ok: bool,
    pub issues: Vec<String>,
}

type SlotKey = (u32, Step, NodeId, NodeId);

pub fn replay_trial(params: &ProtocolParams, record: &TrialRecord, entries: &[&TranscriptRecord]) -> Replayed {
    let m = params.m;
    let frames = &record.frames;
    let mut faulty = vec![false; m];
    for &f in &record.faulty {
        faulty[f] = true;
    }
    let slots: HashMap<SlotKey, &TranscriptRecord> =
        entries.iter().map(|e| ((e.phase, e.step, e.sender, e.receiver), *e)).collect();
    let mut issues = Vec::new();

    let estimate = |key: SlotKey| -> Direction {
        slots
            .get(&key)
            .and_then(|e| e.tally.as_ref())
            .map_or(Direction::PLUS_Z, |t| ted_receive(t).direction)
    };
    let bit = |key: SlotKey| -> Option<bool> {
        slots.get(&key).and_then(|e| match e.payload {
            Payload::Bit(b) if !e.step.is_quantum() => Some(b),
            _ => None,
        })
    };

    // decisions in local coordinates
    let mut decided: Vec<Option<(Direction, u32)>> = vec![None; m];
    let correct: Vec<NodeId> = (0..m).filter(|&i| !faulty[i]).collect();

    for summary in &record.phases {
        let phase = summary.phase;
        let king = summary.king;
        let mut w = vec![Direction::PLUS_Z; m];
        for &i in &correct {
            w[i] = if i == king {
                match summary.king_direction {
                    Some(g) => frames[king].to_local(g),
                    None => {
                        issues.push(format!("phase {phase}: correct king without direction"));
                        Direction::PLUS_Z
                    }
                }
            } else if let Some((d, _)) = decided[i] {
                d
            } else {
                estimate((phase, Step::KingBroadcast, king, i))
            };
            // the node's own exchange messages must carry its input
            for r in (0..m).filter(|&r| r != i) {
                let sent = slots.get(&(phase, Step::DirectionExchange, i, r));
                let expected = QuantumMessage::honest(w[i], params.channel.n);
                let matches = sent.is_some_and(|e| match &e.payload {
                    Payload::Quantum(q) => {
                        q.segments.len() == 1
                            && q.segments[0].count == expected.segments[0].count
                            && (q.segments[0].state.vector() - w[i].vec()).norm() <= REPLAY_TOLERANCE
                    }
                    _ => false,
                });
                if !matches {
                    issues.push(format!("phase {phase}: node {i} -> {r} direction differs from replay"));
                }
            }
        }

        let mut grades = vec![false; m];
        let mut v = vec![Direction::PLUS_Z; m];
        for &i in &correct {
            let a: Vec<Direction> = (0..m)
                .map(|j| if j == i { w[i] } else { estimate((phase, Step::DirectionExchange, j, i)) })
                .collect();
            let flag = weak_consensus(params, i, &a).is_some();
            let f: Vec<bool> = (0..m)
                .map(|j| if j == i { flag } else { bit((phase, Step::FlagExchange, j, i)) == Some(true) })
                .collect();
            for r in (0..m).filter(|&r| r != i) {
                if bit((phase, Step::FlagExchange, i, r)) != Some(flag) {
                    issues.push(format!("phase {phase}: node {i} flag to {r} differs from replay"));
                }
            }
            let g = graded_consensus(params, i, &a, &f);
            grades[i] = g.g;
            v[i] = g.v;
        }

        let mut kings: Vec<PhaseKing> = (0..m).map(|i| PhaseKing::new(i, m, params.t, grades[i])).collect();
        for index in 0..total_rounds(params.t) {
            let round = ConsensusRound::from_index(index);
            let step = Step::ConsensusRound(index);
            for &i in &correct {
                let expect = match kings[i].outgoing(round) {
                    Outgoing::Broadcast(b) => Some(b),
                    Outgoing::Silent => None,
                };
                if let Some(b) = expect {
                    for r in (0..m).filter(|&r| r != i) {
                        if bit((phase, step, i, r)) != b {
                            issues.push(format!("phase {phase} {step}: node {i} -> {r} differs from replay"));
                        }
                    }
                }
            }
            for &i in &correct {
                let incoming: Vec<Option<bool>> = (0..m).map(|j| bit((phase, step, j, i))).collect();
                kings[i].receive(round, &incoming);
            }
        }

        for &i in &correct {
            let out = kings[i].value().then_some(v[i]);
            let recorded = summary.outputs[i].map(|g| frames[i].to_local(g));
            let agree = match (out, recorded) {
                (None, None) => true,
                (Some(a), Some(b)) => distance(a, b) <= REPLAY_TOLERANCE,
                _ => false,
            };
            if !agree {
                issues.push(format!("phase {phase}: node {i} phase output differs from replay"));
            }
            if let (None, Some(d)) = (decided[i], out) {
                decided[i] = Some((d, phase));
            }
        }
    }

    let outputs: Vec<Option<NodeOutput>> = decided
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.filter(|_| !faulty[i])
                .map(|(dir, phase)| NodeOutput { direction: frames[i].to_global(dir), phase })
        })
        .collect();
    let accepted: Vec<Direction> = outputs.iter().flatten().map(|o| o.direction).collect();
    let consistency_ok = accepted.is_empty() || max_pairwise(&accepted) <= params.consistency_radius();

    let links = audit_links(
        params,
        frames,
        &faulty,
        entries.iter().filter(|e| e.step.is_quantum()).map(|e| LinkObservation {
            sender: e.sender,
            receiver: e.receiver,
            payload: &e.payload,
            tally: e.tally.as_ref(),
        }),
    );

    let expected_slots: usize = record.phases.len()
        * king_phase_steps(params.t)
            .iter()
            .map(|s| match s {
                Step::KingBroadcast => m - 1,
                Step::ConsensusRound(i) if ConsensusRound::from_index(*i).step == crate::classical_consensus::KingStep::King => m - 1,
                _ => m * (m - 1),
            })
            .sum::<usize>();
    if entries.len() != expected_slots {
        issues.push(format!("transcript has {} slots, schedule needs {expected_slots}", entries.len()));
    }

    Replayed { outputs, links, consistency_ok, issues }
}
