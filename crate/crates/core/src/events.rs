//! Per-experiment event stream.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    RunStarted,
    RunFinished,
    PromptOpened,
    PromptResolved,
    SchedulePruned,
    ExperimentFinished,
    TriggerFired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub experiment: String,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

pub trait EventSink: Send + Sync {
    fn emit(&self, experiment: &str, kind: EventKind, payload: serde_json::Value);
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: &str, _: EventKind, _: serde_json::Value) {}
}

/// In-memory event history for one experiment, optionally mirrored to an
/// NDJSON file. Sequence numbers start at 0 and increase by one.
#[derive(Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
    file: Option<Mutex<File>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            events: Mutex::default(),
            file: Some(Mutex::new(file)),
        })
    }

    /// Append an event and return it with its sequence number.
    pub fn push(&self, experiment: &str, kind: EventKind, payload: serde_json::Value) -> Event {
        let mut events = self.events.lock().expect("event log poisoned");
        let event = Event {
            seq: events.len() as u64,
            experiment: experiment.to_string(),
            kind,
            payload,
        };
        if let Some(f) = &self.file {
            let line = serde_json::to_string(&event).expect("events serialize");
            let mut f = f.lock().expect("event file poisoned");
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!("cannot append event: {e}");
            }
        }
        events.push(event.clone());
        event
    }

    pub fn since(&self, seq: u64) -> Vec<Event> {
        let events = self.events.lock().expect("event log poisoned");
        events.iter().filter(|e| e.seq >= seq).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("event log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EventSink for EventLog {
    fn emit(&self, experiment: &str, kind: EventKind, payload: serde_json::Value) {
        self.push(experiment, kind, payload);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequence_is_dense_and_mirrored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        let log = EventLog::with_file(&path).unwrap();
        log.emit("e", EventKind::RunStarted, json!({"ordinal": 0}));
        log.emit("e", EventKind::RunFinished, json!({"ordinal": 0}));
        log.emit("e", EventKind::ExperimentFinished, json!({}));
        let seqs: Vec<u64> = log.since(0).iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [0, 1, 2]);
        assert_eq!(log.since(2).len(), 1);
        let lines: Vec<Event> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, log.since(0));
    }
}
