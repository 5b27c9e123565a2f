//! Append-only trajectory logging, replay loading, and pass-rate
//! aggregation.
//!
//! The log is line-delimited: one UTF-8 JSON record per line, appended
//! atomically under a writer lock so concurrent episode workers never
//! interleave partial lines. Readers skip corrupt lines (crash-truncated
//! tails) with a counted warning instead of aborting.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use toolgym_core::curriculum::PassRateRecord;
use toolgym_core::protocol::{ActionKind, Violation};
use toolgym_core::reward::RewardBreakdown;

use crate::env::{EpisodeState, EpisodeStatus, Observation, ObservationKind};

/// One logged turn: the raw policy text plus the parsed shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub raw_text: String,
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_kind: Option<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

/// One logged observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub kind: ObservationKind,
    pub payload: String,
    pub latency_ms: u64,
}

impl From<&Observation> for ObservationRecord {
    fn from(obs: &Observation) -> Self {
        ObservationRecord {
            kind: obs.kind,
            payload: obs.payload.clone(),
            latency_ms: obs.latency_ms,
        }
    }
}

/// Terminal record of one episode. Observations hold the initial
/// observation followed by one entry per tool-call turn; answer turns
/// produce none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub instance_id: String,
    pub turns: Vec<TurnRecord>,
    pub observations: Vec<ObservationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub status: EpisodeStatus,
    pub reward: RewardBreakdown,
    pub wall_ms: u64,
}

impl TrajectoryRecord {
    /// Assembles the terminal record for an episode.
    pub fn from_episode(state: &EpisodeState, reward: RewardBreakdown, wall_ms: u64) -> Self {
        let turns = state
            .history
            .iter()
            .map(|(turn, _)| TurnRecord {
                raw_text: turn.raw_text.clone(),
                violations: turn.violations.clone(),
                action_kind: turn.action_kind,
                tool: turn.tool_call().map(|c| c.tool.clone()),
                task: turn.tool_call().map(|c| c.task.clone()),
            })
            .collect();
        let mut observations = vec![ObservationRecord::from(&state.initial_observation)];
        observations.extend(
            state
                .history
                .iter()
                .filter_map(|(_, obs)| obs.as_ref().map(Into::into)),
        );
        TrajectoryRecord {
            episode_id: state.episode_id.clone(),
            instance_id: state.instance.id.clone(),
            turns,
            observations,
            final_answer: state.final_answer().map(str::to_string),
            status: state.status,
            reward,
            wall_ms,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }

    /// Whether this episode counts as a success for pass-rate purposes.
    pub fn is_success(&self) -> bool {
        self.reward.r_correct == Some(1.0)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot append a non-terminal record (status {0:?})")]
    NotTerminal(EpisodeStatus),
    #[error("log io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("record does not serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Shared append handle over one log file. Each append writes a complete
/// line under the lock and flushes, so the log is prefix-consistent for
/// concurrent readers.
pub struct TrajectoryLog {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl TrajectoryLog {
    /// Creates (truncating) a log file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(TrajectoryLog {
            path,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    /// Opens a log file for appending, creating it if absent.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(TrajectoryLog {
            path,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one terminal record as a single line and flushes.
    pub fn append(&self, record: &TrajectoryRecord) -> Result<(), StoreError> {
        if !record.is_terminal() {
            return Err(StoreError::NotTerminal(record.status));
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut writer = self.writer.lock().expect("log writer lock");
        writer
            .write_all(line.as_bytes())
            .and_then(|()| writer.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}

/// Reads a log back, skipping corrupt lines. Returns the parsed records
/// and the number of skipped lines.
pub fn read_log(path: impl AsRef<Path>) -> Result<(Vec<TrajectoryRecord>, usize), StoreError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrajectoryRecord>(line) {
            Ok(record) => records.push(record),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Groups records by instance and computes per-instance pass rates.
/// Output is sorted by instance id, so the aggregation is invariant to
/// log-line permutation.
pub fn pass_rates(records: &[TrajectoryRecord]) -> Vec<PassRateRecord> {
    let mut counts: std::collections::BTreeMap<&str, (u64, u64)> =
        std::collections::BTreeMap::new();
    for record in records {
        let entry = counts.entry(&record.instance_id).or_insert((0, 0));
        entry.1 += 1;
        if record.is_success() {
            entry.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(id, (successes, rollouts))| {
            PassRateRecord::new(id.to_string(), successes, rollouts)
                .expect("counted rates are consistent")
        })
        .collect()
}

/// Reads a log file and aggregates pass rates, reporting skipped lines.
pub fn pass_rates_from_log(
    path: impl AsRef<Path>,
) -> Result<(Vec<PassRateRecord>, usize), StoreError> {
    let (records, skipped) = read_log(path)?;
    Ok((pass_rates(&records), skipped))
}

/// Writes pass-rate records line-delimited.
pub fn write_pass_rates(
    path: impl AsRef<Path>,
    rates: &[PassRateRecord],
) -> Result<(), StoreError> {
    let path = path.as_ref();
    let mut out = String::new();
    for rate in rates {
        out.push_str(&serde_json::to_string(rate)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads line-delimited pass-rate records.
pub fn read_pass_rates(path: impl AsRef<Path>) -> Result<Vec<PassRateRecord>, StoreError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rates = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rates.push(serde_json::from_str(line)?);
    }
    Ok(rates)
}
