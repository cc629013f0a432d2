//! Experiment runner: seeded trials in parallel, per-trial records, a summary
//! against the per-run success bound, and file output.

pub mod config;
pub mod metrics;
pub mod replay;
pub mod report;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversaries::{AdversaryError, AdversarySpec};
use crate::geometry::{random_frame, Frame};
use crate::netsim::{stream_tags, NetError, Network, Payload, SeedTree, Step, Transcript};
use crate::quantum_link::MeasurementTally;
use crate::rf_protocols::{rf_consensus, ConsensusOutcome, ProtocolParams};
use crate::NodeId;

pub use config::{auto_size, ConfigError, Experiment, ExperimentConfig, Sizing};
pub use metrics::{compute_metrics, NodeOutput, PhaseSummary, TrialMetrics};

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error("trial {trial}: {source}")]
    Net { trial: u64, source: NetError },
    #[error("building thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Everything that determines one trial.
#[derive(Clone, Debug)]
pub struct TrialSetup {
    pub params: ProtocolParams,
    pub adversary: AdversarySpec,
    pub faulty: Vec<bool>,
    pub frames: Vec<Frame>,
    pub seeds: SeedTree,
}

impl TrialSetup {
    /// Trial `index` of an experiment: its own seed, Haar-random frames.
    pub fn for_trial(exp: &Experiment, index: u64) -> Self {
        let seed = SeedTree::new(exp.master_seed).derive(&[stream_tags::TRIAL, index]);
        let seeds = SeedTree::new(seed);
        let frames = (0..exp.params.m)
            .map(|i| random_frame(&mut seeds.stream(&[stream_tags::FRAMES, i as u64])))
            .collect();
        TrialSetup {
            params: exp.params,
            adversary: exp.adversary.clone(),
            faulty: exp.faulty.clone(),
            frames,
            seeds,
        }
    }

    /// Same trial with every frame pre-multiplied by `rotation`.
    pub fn rotated(&self, rotation: &Frame) -> Self {
        TrialSetup {
            frames: self.frames.iter().map(|f| f.rotated_by(rotation)).collect(),
            ..self.clone()
        }
    }

    pub fn simulate(&self) -> Result<(ConsensusOutcome, Transcript), HarnessError> {
        let mut adversary = self.adversary.build()?;
        let mut net = Network::new(self.frames.clone(), self.faulty.clone(), self.params.channel, self.seeds)
            .map_err(|source| HarnessError::Net { trial: 0, source })?;
        let outcome = rf_consensus(&self.params, adversary.as_mut(), &mut net)
            .map_err(|source| HarnessError::Net { trial: 0, source })?;
        Ok((outcome, net.into_transcript()))
    }
}

/// One line of `trials.jsonl`. Contains no timing, so it is reproducible
/// byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub faulty: Vec<NodeId>,
    pub frames: Vec<Frame>,
    pub phases: Vec<PhaseSummary>,
    /// Final output per node in global coordinates; `None` for faulty nodes
    /// and for nodes that never accepted.
    pub outputs: Vec<Option<NodeOutput>>,
    pub metrics: TrialMetrics,
}

/// One line of `transcript.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub trial: u64,
    pub phase: u32,
    pub step: Step,
    pub sender: NodeId,
    pub receiver: NodeId,
    #[serde(flatten)]
    pub payload: Payload,
    pub tally: Option<MeasurementTally>,
}

pub fn export_transcript(trial: u64, transcript: &Transcript) -> Vec<TranscriptRecord> {
    transcript
        .entries()
        .iter()
        .map(|e| TranscriptRecord {
            trial,
            phase: e.round.phase,
            step: e.round.step,
            sender: e.sender,
            receiver: e.receiver,
            payload: e.payload.clone(),
            tally: e.tally,
        })
        .collect()
}

pub struct TrialRun {
    pub record: TrialRecord,
    pub seconds: f64,
    pub transcript: Option<Vec<TranscriptRecord>>,
}

pub fn run_trial(exp: &Experiment, index: u64) -> Result<TrialRun, HarnessError> {
    let start = Instant::now();
    let setup = TrialSetup::for_trial(exp, index);
    let (outcome, transcript) = setup.simulate().map_err(|e| match e {
        HarnessError::Net { source, .. } => HarnessError::Net { trial: index, source },
        other => other,
    })?;
    let metrics = compute_metrics(&setup.params, &setup.frames, &setup.faulty, &outcome, &transcript);
    let (outputs, phases) = metrics::globalize(&outcome, &setup.frames);
    let record = TrialRecord {
        trial: index,
        seed: setup.seeds.root(),
        faulty: (0..setup.faulty.len()).filter(|&i| setup.faulty[i]).collect(),
        frames: setup.frames,
        phases,
        outputs,
        metrics,
    };
    let transcript = exp.transcript.then(|| export_transcript(index, &transcript));
    Ok(TrialRun { record, seconds: start.elapsed().as_secs_f64(), transcript })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub total_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_version: u32,
    pub m: usize,
    pub t: usize,
    pub n: u64,
    pub delta: f64,
    pub delta_eff: f64,
    pub epsilon: f64,
    pub adversary: AdversarySpec,
    pub faulty: Vec<NodeId>,
    pub trials: u64,
    pub master_seed: u64,
    pub violations: u64,
    pub violation_rate: f64,
    pub consistency_violations: u64,
    pub termination_failures: u64,
    pub persistency_violations: u64,
    pub clean_trials: u64,
    pub conditional_violations: u64,
    pub q_succ: f64,
    /// `q_succ^(m²·(t+1))`.
    pub bound: f64,
    pub allowed_violation_rate: f64,
    pub mean_eta: f64,
    pub max_eta: f64,
    pub mean_phases: f64,
    pub pass: bool,
    pub runtime: Runtime,
}

pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub summary: Summary,
    pub transcripts: Option<Vec<TranscriptRecord>>,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(exp: &Experiment, records: &[TrialRecord], seconds: &[f64], total_s: f64) -> Summary {
    let count = |f: &dyn Fn(&TrialMetrics) -> bool| records.iter().filter(|r| f(&r.metrics)).count() as u64;
    let trials = records.len() as u64;
    let violations = count(&|m| m.violation);
    let violation_rate = violations as f64 / trials.max(1) as f64;
    let allowed = exp.allowed_violation_rate();
    let conditional = count(&|m| m.conditional_violation());
    let etas: Vec<f64> = records.iter().filter(|r| !r.metrics.all_bottom).map(|r| r.metrics.eta_emp).collect();
    let mut sorted = seconds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = &exp.params;
    Summary {
        config_version: config::CONFIG_VERSION,
        m: p.m,
        t: p.t,
        n: p.channel.n,
        delta: p.delta,
        delta_eff: p.delta_eff(),
        epsilon: p.channel.epsilon,
        adversary: exp.adversary.clone(),
        faulty: (0..exp.faulty.len()).filter(|&i| exp.faulty[i]).collect(),
        trials,
        master_seed: exp.master_seed,
        violations,
        violation_rate,
        consistency_violations: count(&|m| !m.consistency_ok),
        termination_failures: count(&|m| !m.terminated),
        persistency_violations: count(&|m| !m.persistency_ok()),
        clean_trials: count(&|m| m.clean()),
        conditional_violations: conditional,
        q_succ: p.q_succ(),
        bound: p.run_success_bound(),
        allowed_violation_rate: allowed,
        mean_eta: if etas.is_empty() { 0.0 } else { etas.iter().sum::<f64>() / etas.len() as f64 },
        max_eta: etas.iter().copied().fold(0.0, f64::max),
        mean_phases: records.iter().map(|r| r.metrics.phases_used as f64).sum::<f64>() / trials.max(1) as f64,
        pass: violation_rate <= allowed && conditional == 0,
        runtime: Runtime { total_s, p50_s: percentile(&sorted, 0.5), p99_s: percentile(&sorted, 0.99) },
    }
}

/// Runs every trial on `jobs` threads (all cores when `None`). Results are
/// ordered by trial index.
pub fn run_experiment(exp: &Experiment, jobs: Option<usize>) -> Result<ExperimentResult, HarnessError> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let runs: Vec<TrialRun> =
        pool.install(|| (0..exp.trials).into_par_iter().map(|i| run_trial(exp, i)).collect::<Result<_, _>>())?;
    let total_s = start.elapsed().as_secs_f64();
    let seconds: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
    let mut records = Vec::with_capacity(runs.len());
    let mut transcripts = exp.transcript.then(Vec::new);
    for run in runs {
        records.push(run.record);
        if let (Some(all), Some(t)) = (transcripts.as_mut(), run.transcript) {
            all.extend(t);
        }
    }
    let summary = summarize(exp, &records, &seconds, total_s);
    Ok(ExperimentResult { records, summary, transcripts })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}

/// Writes `trials.jsonl`, `summary.json`, `report.csv` and, when recorded,
/// `transcript.jsonl` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRIALS_FILE), &result.records)?;
    let mut summary = serde_json::to_string_pretty(&result.summary)?;
    summary.push('\n');
    std::fs::write(dir.join(SUMMARY_FILE), summary)?;
    report::emit_report(std::slice::from_ref(&result.summary), File::create(dir.join(REPORT_FILE))?)?;
    if let Some(t) = &result.transcripts {
        write_jsonl(&dir.join(TRANSCRIPT_FILE), t)?;
    }
    Ok(())
}
