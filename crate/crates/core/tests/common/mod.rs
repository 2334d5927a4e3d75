#![allow(dead_code)]

use std::path::{Path, PathBuf};

use xpflow_core::events::EventLog;
use xpflow_core::executor::{ExecOptions, Executor, ExperimentReport};
use xpflow_core::interaction::Responder;
use xpflow_core::knowledge::KgStore;
use xpflow_core::{parse_experiment, ExperimentSpec};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating")
}

pub fn fixture_source(name: &str) -> String {
    std::fs::read_to_string(fixture_dir().join(name)).unwrap()
}

pub fn fixture_spec() -> ExperimentSpec {
    parse(&fixture_source("experiment.xp"))
}

pub fn parse(src: &str) -> ExperimentSpec {
    parse_experiment(src).unwrap_or_else(|e| panic!("fixture does not parse: {e:?}"))
}

/// The fixture spec with an interaction section inserted before the monitor.
pub fn with_interaction(section: &str) -> ExperimentSpec {
    let src = fixture_source("experiment.xp").replacen("  monitor {", &format!("  {section}\n  monitor {{"), 1);
    parse(&src)
}

/// Accuracy table hard-coded in the evaluation stub, read back from the stub
/// source: (model, lr, accuracy).
pub fn stub_table() -> Vec<(String, String, f64)> {
    let src = std::fs::read_to_string(fixture_dir().join("stubs/evaluate_model.sh")).unwrap();
    let mut rows = Vec::new();
    for chunk in src.split(";;") {
        let Some(start) = chunk.find('"') else { continue };
        let rest = &chunk[start + 1..];
        let Some(end) = rest.find('"') else { continue };
        let key = &rest[..end];
        let Some(acc) = rest[end..].split("acc=").nth(1) else { continue };
        let mut parts = key.split(' ');
        rows.push((
            parts.next().unwrap().to_string(),
            parts.next().unwrap().to_string(),
            acc.trim().parse().unwrap(),
        ));
    }
    rows
}

pub struct Session {
    pub store: tempfile::TempDir,
    pub executor: Executor,
    pub kr: KgStore,
    pub events: EventLog,
}

impl Session {
    pub fn new() -> Self {
        let store = tempfile::tempdir().unwrap();
        Self::with_options(store, |_| {})
    }

    pub fn with_options(store: tempfile::TempDir, tweak: impl FnOnce(&mut ExecOptions)) -> Self {
        let mut options = ExecOptions::new(store.path(), fixture_dir());
        tweak(&mut options);
        let kr = KgStore::open(&store.path().join("kr")).unwrap();
        Session {
            executor: Executor::new(options),
            kr,
            events: EventLog::new(),
            store,
        }
    }

    pub fn run(&mut self, spec: &ExperimentSpec, responder: &mut dyn Responder) -> ExperimentReport {
        self.executor
            .run_experiment(spec, &mut self.kr, responder, &self.events)
            .unwrap()
    }
}
