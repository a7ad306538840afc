//! Line-delimited JSON trajectory logs.
//!
//! A log is a sequence of batches. Each batch is one `batch` line followed
//! by exactly `g` `trajectory` lines for the same query.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{terminal_accuracy, Trajectory};
use crate::rollout::BatchHeader;
use crate::rollout::GroupBatch;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Batch(BatchHeader),
    Trajectory(Trajectory),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct LogError {
    pub line: usize,
    pub message: String,
}

/// A batch as read back from a log.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedBatch {
    pub header: BatchHeader,
    pub trajectories: Vec<Trajectory>,
}

pub fn entry_line(entry: &LogEntry) -> String {
    serde_json::to_string(entry).expect("log entries always serialize")
}

/// Append a batch's header and trajectories.
pub fn write_batch<F: Real>(batch: &GroupBatch<F>, out: &mut String) {
    write_logged(&batch.header(), &batch.trajectories, out);
}

fn write_logged(header: &BatchHeader, trajectories: &[Trajectory], out: &mut String) {
    out.push_str(&entry_line(&LogEntry::Batch(header.clone())));
    out.push('\n');
    for t in trajectories {
        out.push_str(&entry_line(&LogEntry::Trajectory(t.clone())));
        out.push('\n');
    }
}

pub fn write_log(batches: &[LoggedBatch]) -> String {
    let mut out = String::new();
    for b in batches {
        write_logged(&b.header, &b.trajectories, &mut out);
    }
    out
}

/// Parse and validate a log. Line numbers in errors are 1-based.
pub fn parse_log(text: &str) -> Result<Vec<LoggedBatch>, LogError> {
    let mut batches: Vec<LoggedBatch> = Vec::new();
    let mut open_since = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| LogError { line, message };
        if raw.trim().is_empty() {
            return Err(err("blank line".into()));
        }
        let entry: LogEntry = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        match entry {
            LogEntry::Batch(header) => {
                if let Some(prev) = batches.last() {
                    if prev.trajectories.len() != prev.header.g {
                        return Err(LogError {
                            line: open_since,
                            message: format!(
                                "batch declares g = {} but has {} trajectories",
                                prev.header.g,
                                prev.trajectories.len()
                            ),
                        });
                    }
                }
                if header.g == 0 {
                    return Err(err("batch with g = 0".into()));
                }
                open_since = line;
                batches.push(LoggedBatch {
                    header,
                    trajectories: Vec::new(),
                });
            }
            LogEntry::Trajectory(t) => {
                let Some(batch) = batches.last_mut() else {
                    return Err(err("trajectory before any batch header".into()));
                };
                if batch.trajectories.len() == batch.header.g {
                    return Err(err(format!("batch already has its {} trajectories", batch.header.g)));
                }
                if t.query.id != batch.header.query_id {
                    return Err(err(format!(
                        "query id {} does not match batch query {}",
                        t.query.id, batch.header.query_id
                    )));
                }
                check_trajectory(&t).map_err(err)?;
                batch.trajectories.push(t);
            }
        }
    }
    if let Some(last) = batches.last() {
        if last.trajectories.len() != last.header.g {
            return Err(LogError {
                line: open_since,
                message: format!(
                    "batch declares g = {} but has {} trajectories",
                    last.header.g,
                    last.trajectories.len()
                ),
            });
        }
    }
    Ok(batches)
}

fn check_trajectory(t: &Trajectory) -> Result<(), String> {
    for (k, w) in t.worker_traces.iter().enumerate() {
        if w.slot != k + 1 {
            return Err(format!("worker trace {k} has slot {}, expected {}", w.slot, k + 1));
        }
        if w.calls.iter().any(|c| c.agent.slot != w.slot) {
            return Err(format!("worker slot {} holds a foreign tool call", w.slot));
        }
    }
    let acc = terminal_accuracy(t).map_err(|e| e.to_string())?;
    if acc != t.r_acc {
        return Err(format!("r_acc {} disagrees with the recorded outcome {acc}", t.r_acc));
    }
    Ok(())
}
