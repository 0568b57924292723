//! Append-only JSONL run log and its replay.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::swarm::{ParticleId, SnapshotEntry};

/// Components of the position kept in the log digest.
pub const DIGEST_HEAD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Header,
    Register,
    PublishState,
    SnapshotReleased,
    RunComplete,
    RunFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDigest {
    #[serde(with = "crate::swarm::nonfinite_vec")]
    pub head: Vec<f64>,
    #[serde(with = "crate::swarm::nonfinite")]
    pub l2: f64,
}

impl PositionDigest {
    pub fn of(position: &[f64]) -> Self {
        PositionDigest {
            head: position.iter().take(DIGEST_HEAD).copied().collect(),
            l2: position.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub run_id: String,
    pub event: LogEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particle_id: Option<ParticleId>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::swarm::opt_nonfinite")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<PositionDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunLogRecord {
    pub fn new(run_id: &str, event: LogEvent) -> Self {
        RunLogRecord {
            timestamp: now_ms(),
            run_id: run_id.to_string(),
            event,
            epoch: None,
            particle_id: None,
            loss: None,
            digest: None,
            expected_particles: None,
            message: None,
        }
    }

    pub fn header(run_id: &str, expected_particles: usize) -> Self {
        RunLogRecord { expected_particles: Some(expected_particles), ..Self::new(run_id, LogEvent::Header) }
    }

    pub fn publish(run_id: &str, epoch: u64, entry: &SnapshotEntry) -> Self {
        RunLogRecord {
            epoch: Some(epoch),
            particle_id: Some(entry.particle_id),
            loss: Some(entry.loss),
            digest: Some(PositionDigest::of(&entry.position)),
            ..Self::new(run_id, LogEvent::PublishState)
        }
    }
}

/// Line-delimited JSON sink. Each record is one line.
pub struct RunLog {
    out: Box<dyn Write + Send>,
}

impl RunLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        RunLog { out }
    }

    pub fn create(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RunLog::new(Box::new(std::io::BufWriter::new(file))))
    }

    /// A log that keeps nothing.
    pub fn discard() -> Self {
        RunLog::new(Box::new(std::io::sink()))
    }

    pub fn append(&mut self, record: &RunLogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// State reconstructed from a run log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub run_id: String,
    pub expected_particles: usize,
    /// `epoch -> particle -> loss`.
    pub losses: BTreeMap<u64, BTreeMap<ParticleId, f64>>,
    pub released: Vec<u64>,
    pub completed: bool,
    pub failure: Option<String>,
}

impl Replay {
    pub fn publish_count(&self) -> usize {
        self.losses.values().map(|m| m.len()).sum()
    }
}

pub fn replay<R: BufRead>(input: R) -> Result<Replay> {
    let mut out = Replay::default();
    let mut saw_header = false;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunLogRecord = serde_json::from_str(&line)?;
        let bad = |m: &str| Error::protocol(format!("run log line {}: {m}", n + 1));
        match rec.event {
            LogEvent::Header => {
                saw_header = true;
                out.run_id = rec.run_id;
                out.expected_particles = rec.expected_particles.unwrap_or(0);
            }
            _ if !saw_header => return Err(bad("record before header")),
            LogEvent::PublishState => {
                let (Some(epoch), Some(pid), Some(loss)) = (rec.epoch, rec.particle_id, rec.loss) else {
                    return Err(bad("publish record missing fields"));
                };
                if out.losses.entry(epoch).or_default().insert(pid, loss).is_some() {
                    return Err(bad("duplicate publish record"));
                }
            }
            LogEvent::SnapshotReleased => out.released.push(rec.epoch.ok_or_else(|| bad("release without epoch"))?),
            LogEvent::RunComplete => out.completed = true,
            LogEvent::RunFailed => out.failure = Some(rec.message.unwrap_or_default()),
            LogEvent::Register => {}
        }
    }
    if !saw_header {
        return Err(Error::protocol("run log has no header"));
    }
    Ok(out)
}
