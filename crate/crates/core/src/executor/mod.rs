//! Running experiments.
//!
//! Tasks are opaque executables. The engine writes a JSON manifest, invokes
//! `<impl> --manifest <path>` and reads `<output_dir>/result.json` back. A
//! concrete workflow runs its tasks in topological order; an experiment runs
//! the configurations its strategy asks for, fires interaction checkpoints
//! between them and records every run in the knowledge repository.

mod experiment;
mod planning;
mod task;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Configuration, ConstraintSpec, Hardness, Verdict};

pub use experiment::{canonical_export, Executor, ExperimentReport, ReportStatus, Winner};
pub use planning::{
    estimate_experiment_cost, evaluate_retraining_trigger, reexecution_plan, CostEstimate,
    EstimateSource, TriggerDecision, TriggerReason,
};
pub use task::run_task;

/// Default number of production values a drift check looks at.
pub const DEFAULT_WINDOW: usize = 20;

/// `monitor { metric m threshold t window w min_new n; }`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub metric: String,
    pub threshold: f64,
    pub window: usize,
    pub min_new: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed,
    TimedOut,
    Skipped,
}

/// Resources consumed. `peak_mem_mb` is `None` when the OS did not report it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostRecord {
    pub wall_s: f64,
    pub cpu_s: f64,
    pub peak_mem_mb: Option<f64>,
    pub interaction_min: f64,
}

impl CostRecord {
    /// Sum of times and interaction, maximum of memory.
    pub fn combine(&self, other: &CostRecord) -> CostRecord {
        CostRecord {
            wall_s: self.wall_s + other.wall_s,
            cpu_s: self.cpu_s + other.cpu_s,
            peak_mem_mb: match (self.peak_mem_mb, other.peak_mem_mb) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
            interaction_min: self.interaction_min + other.interaction_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub status: TaskStatus,
    /// Output name to artifact path, relative to the store root.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub cost: CostRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskResult {
    pub(crate) fn skipped(task: &str) -> Self {
        TaskResult {
            task: task.to_string(),
            status: TaskStatus::Skipped,
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            cost: CostRecord::default(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub constraint: ConstraintSpec,
    pub value: Option<f64>,
    pub verdict: Verdict,
}

/// Everything known about one executed concrete workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub experiment: String,
    pub fingerprint: String,
    /// Data-independent identity of the configuration.
    pub config_key: String,
    /// Digest of the workflow template.
    pub workflow_digest: String,
    pub configuration: Configuration,
    pub deployment: BTreeMap<String, String>,
    /// Dataset reference to content digest.
    pub input_digests: BTreeMap<String, String>,
    pub status: RunStatus,
    pub tasks: Vec<TaskResult>,
    pub metrics: BTreeMap<String, f64>,
    pub verdicts: Vec<ConstraintOutcome>,
    pub cost: CostRecord,
    pub cache_hit: bool,
    pub started_ms: u64,
    pub finished_ms: u64,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Succeeded and passed every hard constraint.
    pub fn feasible(&self) -> bool {
        self.status == RunStatus::Ok
            && self
                .verdicts
                .iter()
                .all(|v| v.constraint.hardness == Hardness::Soft || v.verdict == Verdict::Pass)
    }
}

/// The JSON document handed to a task process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task: String,
    pub params: BTreeMap<String, crate::model::Value>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub deployment: Option<String>,
    pub output_dir: PathBuf,
}

/// What a task writes to `<output_dir>/result.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskOutput {
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    /// Directory holding `runs/` and `kr/`.
    pub store: PathBuf,
    /// Directory relative task commands and dataset references resolve against.
    pub base_dir: PathBuf,
    pub workers: usize,
    /// Replaces the strategy seed when set.
    pub seed: Option<u64>,
    pub user: String,
    /// Drop configurations whose history is in the bottom quantile.
    pub prune_history: bool,
    pub prune_quantile: f64,
    /// Run exactly these ordinals (in this order) instead of asking the strategy.
    pub plan: Option<Vec<usize>>,
    /// Overrides every task's timeout.
    pub task_timeout_s: Option<u64>,
}

impl ExecOptions {
    pub fn new(store: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Self {
        ExecOptions {
            store: store.into(),
            base_dir: base_dir.into(),
            workers: 1,
            seed: None,
            user: "anonymous".to_string(),
            prune_history: false,
            prune_quantile: 0.5,
            plan: None,
            task_timeout_s: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("specification is invalid: {0}")]
    InvalidSpec(String),
    #[error("input `{reference}` cannot be read: {source}")]
    MissingInput {
        reference: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Strategy(#[from] crate::strategy::StrategyError),
    #[error(transparent)]
    Knowledge(#[from] crate::knowledge::KrError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
