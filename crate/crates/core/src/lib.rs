//! Experiment-driven optimization of analytics workflows.
//!
//! An experiment is declared in a small textual language ([`dsl`]): a workflow
//! template with abstract tasks, a set of variability points, an intent and a
//! strategy. The engine expands the variability points into concrete
//! workflows ([`model`]), decides which of them to run ([`strategy`]),
//! executes them as external processes ([`executor`]), keeps the human in the
//! loop through budgeted checkpoints ([`interaction`]) and records everything
//! in a knowledge graph ([`knowledge`]) that later powers recommendations,
//! redundancy checks, cost estimates and drift-triggered re-execution.

pub mod canonical;
pub mod dsl;
pub mod events;
pub mod executor;
pub mod interaction;
pub mod knowledge;
pub mod model;
pub mod strategy;

pub use dsl::{canonical_form, check_semantics, parse_experiment, ExperimentSpec, SourceError};
pub use model::{Caw, Configuration, Value, VariabilityPoint, WorkflowSpec};
