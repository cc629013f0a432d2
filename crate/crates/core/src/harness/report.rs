//! Plot-ready CSV tables, one row per experiment summary.

use std::io::Write;

use serde::Serialize;

use super::{HarnessError, Summary};

pub const COLUMNS: [&str; 12] = [
    "m",
    "t",
    "n",
    "epsilon",
    "adversary",
    "trials",
    "violation_rate",
    "bound",
    "mean_eta",
    "max_eta",
    "runtime_p50",
    "runtime_p99",
];

#[derive(Serialize)]
struct Row<'a> {
    m: usize,
    t: usize,
    n: u64,
    epsilon: f64,
    adversary: &'a str,
    trials: u64,
    violation_rate: f64,
    bound: f64,
    mean_eta: f64,
    max_eta: f64,
    runtime_p50: f64,
    runtime_p99: f64,
}

/// Header plus one row per summary; an empty slice gives the header alone.
pub fn emit_report<W: Write>(summaries: &[Summary], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for s in summaries {
        let label = s.adversary.label();
        w.serialize(Row {
            m: s.m,
            t: s.t,
            n: s.n,
            epsilon: s.epsilon,
            adversary: &label,
            trials: s.trials,
            violation_rate: s.violation_rate,
            bound: s.bound,
            mean_eta: s.mean_eta,
            max_eta: s.max_eta,
            runtime_p50: s.runtime.p50_s,
            runtime_p99: s.runtime.p99_s,
        })?;
    }
    w.flush()?;
    Ok(())
}
