//! Append-only JSON Lines event log. Every state change of a session is one
//! event; replaying the events rebuilds the session state exactly.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostCounters;
use crate::label_tree::LabelTree;
use crate::scheduler::{SessionConfig, ShapeProposal};
use crate::session::SessionState;
use crate::{PartId, ShapeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub session: String,
    #[serde(flatten)]
    pub body: EventBody,
    /// Seconds of simulated human time this event added.
    pub simulated_cost_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    SessionStart(SessionStart),
    Propose(ProposeEvent),
    VerifyBatch(VerifyBatchEvent),
    ModifyShape(ModifyShapeEvent),
    Finetune(FinetuneEvent),
    NodeComplete(NodeCompleteEvent),
    SessionComplete(SessionCompleteEvent),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::SessionStart(_) => "session_start",
            EventBody::Propose(_) => "propose",
            EventBody::VerifyBatch(_) => "verify_batch",
            EventBody::ModifyShape(_) => "modify_shape",
            EventBody::Finetune(_) => "finetune",
            EventBody::NodeComplete(_) => "node_complete",
            EventBody::SessionComplete(_) => "session_complete",
        }
    }
}

/// Everything replay needs that is not in later events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStart {
    pub dataset: String,
    pub proposer: String,
    pub config: SessionConfig,
    /// The working tree (pruned, or flattened for flat runs).
    pub tree: LabelTree,
    pub shapes: BTreeMap<ShapeId, Vec<PartId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeEvent {
    pub node: String,
    pub iteration: u32,
    pub proposals: Vec<ShapeProposal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub shape: ShapeId,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyBatchEvent {
    pub node: String,
    pub iteration: u32,
    pub batch: u32,
    pub verdicts: Vec<Verdict>,
    pub counters: CostCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifyShapeEvent {
    pub node: String,
    pub iteration: u32,
    pub shape: ShapeId,
    pub labels: Vec<String>,
    pub counters: CostCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneEvent {
    pub node: String,
    pub iteration: u32,
    pub confirmed_shapes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCompleteEvent {
    pub node: String,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCompleteEvent {
    pub total_seconds: f64,
}

/// Where event timestamps come from. Simulated runs derive them from the
/// accumulated human-time estimate so identical runs give identical logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    Wall,
    Simulated,
}

impl Clock {
    pub fn timestamp(&self, simulated_seconds: f64) -> DateTime<Utc> {
        match self {
            Clock::Wall => Utc::now(),
            Clock::Simulated => {
                let base = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).single().expect("valid epoch");
                base + chrono::Duration::milliseconds((simulated_seconds * 1000.0).round() as i64)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

/// Appends events, one JSON object per LF-terminated line, flushing each.
#[derive(Debug)]
pub struct AuditWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl AuditWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().write(true).create(true).truncate(true).open(path)?;
        Ok(AuditWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(AuditWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, event: &AuditEvent) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Parses a whole log. A line that fails to parse, or a last line without
/// its terminator (a torn write), is reported with its 1-based number.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<AuditEvent>, AuditError> {
    let mut events = Vec::new();
    let mut reader = BufReader::new(reader);
    let mut buf = String::new();
    let mut line = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line += 1;
        if !buf.ends_with('\n') {
            return Err(AuditError::Line {
                line,
                message: "truncated line (no terminator)".into(),
            });
        }
        let text = buf.trim_end_matches('\n');
        if text.is_empty() {
            return Err(AuditError::Line {
                line,
                message: "empty line".into(),
            });
        }
        let event = serde_json::from_str(text).map_err(|e| AuditError::Line {
            line,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Rebuilds session state from a log file. An empty log yields a fresh,
/// unstarted state.
pub fn replay_audit(path: &Path) -> Result<SessionState, AuditError> {
    let events = read_events(File::open(path)?)?;
    replay_events(&events)
}

pub fn replay_events(events: &[AuditEvent]) -> Result<SessionState, AuditError> {
    let mut state = SessionState::default();
    for (i, event) in events.iter().enumerate() {
        state.apply(event).map_err(|e| AuditError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(seq: u64) -> AuditEvent {
        AuditEvent {
            seq,
            timestamp: Clock::Simulated.timestamp(1.2345),
            session: "s".into(),
            body: EventBody::NodeComplete(NodeCompleteEvent {
                node: "root".into(),
                iterations: 2,
            }),
            simulated_cost_seconds: 0.1 + 0.2,
        }
    }

    #[test]
    fn event_line_shape_and_roundtrip() {
        let text = serde_json::to_string(&event(3)).unwrap();
        assert!(text.contains("\"kind\":\"node_complete\""));
        assert!(text.contains("\"payload\":{"));
        let back: AuditEvent = serde_json::from_str(&text).unwrap();
        assert_eq!(back, event(3));
        assert_eq!(back.simulated_cost_seconds.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn corrupt_and_torn_lines_report_line_numbers() {
        let good = serde_json::to_string(&event(0)).unwrap();
        let text = format!("{good}\n{{not json\n");
        match read_events(text.as_bytes()) {
            Err(AuditError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = format!("{good}\n{}", &good[..good.len() / 2]);
        match read_events(text.as_bytes()) {
            Err(AuditError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_events("".as_bytes()).unwrap().is_empty());
    }
}
