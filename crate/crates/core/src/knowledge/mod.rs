//! Knowledge repository: the institutional memory of past experiments.
//!
//! A typed graph of experiments, runs, users, datasets, algorithms, intents
//! and metrics, together with the full run records. All changes are appended
//! to an NDJSON log; a snapshot is the canonical JSON of the resulting state
//! and replaying the log always reproduces it byte for byte.

mod embed;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::dsl::ExperimentSpec;
use crate::executor::{RunRecord, RunStatus};
use crate::interaction::UserProfile;
use crate::model::{Value, VpKind};
use crate::strategy::MetricStats;

pub use embed::{
    recommend, score_triple, score_vectors, train_embeddings, train_embeddings_with,
    EmbeddingConfig, EmbeddingTable, RecommendContext, Recommendation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    Experiment,
    Workflow,
    Task,
    Algorithm,
    Dataset,
    User,
    Intent,
    Metric,
    Run,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub id: String,
}

impl Entity {
    pub fn new(kind: EntityKind, id: impl Into<String>) -> Self {
        Entity { kind, id: id.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Relation {
    RanBy,
    HasIntent,
    UsesDataset,
    UsesAlgorithm,
    ProducedRun,
    AchievedMetric,
    HasProficiency,
    GaveFeedback,
    PartOfExperiment,
}

impl Relation {
    pub const ALL: [Relation; 9] = [
        Relation::RanBy,
        Relation::HasIntent,
        Relation::UsesDataset,
        Relation::UsesAlgorithm,
        Relation::ProducedRun,
        Relation::AchievedMetric,
        Relation::HasProficiency,
        Relation::GaveFeedback,
        Relation::PartOfExperiment,
    ];

    /// Allowed head kinds and the tail kind.
    pub fn signature(self) -> (&'static [EntityKind], EntityKind) {
        use EntityKind::*;
        match self {
            Relation::RanBy => (&[Run], User),
            Relation::HasIntent => (&[Experiment], Intent),
            Relation::UsesDataset => (&[Run], Dataset),
            Relation::UsesAlgorithm => (&[Run], Algorithm),
            Relation::ProducedRun => (&[Workflow], Run),
            Relation::AchievedMetric => (&[Run], Metric),
            Relation::HasProficiency => (&[User], Algorithm),
            Relation::GaveFeedback => (&[User], Run),
            Relation::PartOfExperiment => (&[Run, Workflow], Experiment),
        }
    }

    pub fn tail_kind(self) -> EntityKind {
        self.signature().1
    }

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    pub fn parse(s: &str) -> Option<Relation> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub head: Entity,
    pub relation: Relation,
    pub tail: Entity,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl Triple {
    pub fn new(head: Entity, relation: Relation, tail: Entity) -> Self {
        Triple {
            head,
            relation,
            tail,
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KrError {
    #[error("{relation:?} cannot link {head:?} to {tail:?}")]
    SignatureViolation {
        relation: Relation,
        head: EntityKind,
        tail: EntityKind,
    },
    #[error("unknown entity {0:?}")]
    UnknownEntity(Entity),
    #[error("relation {0:?} has no embedding")]
    UnknownRelation(Relation),
    #[error("graph has no triples")]
    EmptyGraph,
    #[error("none of the context entities is embedded")]
    NoContext,
    #[error("repository i/o: {0}")]
    Io(String),
    #[error("corrupt log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

impl From<std::io::Error> for KrError {
    fn from(e: std::io::Error) -> Self {
        KrError::Io(e.to_string())
    }
}

/// One line of the append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Entity { seq: u64, entity: Entity },
    Triple { seq: u64, triple: Triple },
    Run { seq: u64, run: Box<RunRecord> },
}

impl LogEntry {
    pub fn seq(&self) -> u64 {
        match self {
            LogEntry::Entity { seq, .. } | LogEntry::Triple { seq, .. } | LogEntry::Run { seq, .. } => *seq,
        }
    }
}

/// Full repository contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgState {
    pub seq: u64,
    pub entities: BTreeSet<Entity>,
    pub triples: Vec<Triple>,
    pub runs: BTreeMap<String, RunRecord>,
    #[serde(skip)]
    triple_keys: HashSet<String>,
}

impl KgState {
    fn apply(&mut self, entry: LogEntry) {
        self.seq = entry.seq();
        match entry {
            LogEntry::Entity { entity, .. } => {
                self.entities.insert(entity);
            }
            LogEntry::Triple { triple, .. } => {
                self.entities.insert(triple.head.clone());
                self.entities.insert(triple.tail.clone());
                self.triple_keys.insert(to_canonical_json(&triple));
                self.triples.push(triple);
            }
            LogEntry::Run { run, .. } => {
                self.runs.insert(run.run_id.clone(), *run);
            }
        }
    }

    fn reindex(&mut self) {
        self.triple_keys = self.triples.iter().map(to_canonical_json).collect();
    }

    pub fn has_triple(&self, t: &Triple) -> bool {
        self.triple_keys.contains(&to_canonical_json(t))
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.kind == kind)
    }

    pub fn to_canonical(&self) -> String {
        to_canonical_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "run_id", rename_all = "snake_case")]
pub enum Redundancy {
    NotRedundant,
    RedundantExact(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "key", rename_all = "snake_case")]
pub enum LineageQuery {
    Experiment(String),
    Dataset(String),
    Fingerprint(String),
}

/// Single-writer store; either in memory or backed by `<dir>/log.ndjson`
/// and `<dir>/snapshot.json`.
#[derive(Debug)]
pub struct KgStore {
    dir: Option<PathBuf>,
    log: Option<File>,
    state: KgState,
}

pub const LOG_FILE: &str = "log.ndjson";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Rebuild state from a log file.
pub fn replay_log(path: &Path) -> Result<KgState, KrError> {
    let mut state = KgState::default();
    if !path.exists() {
        return Ok(state);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| KrError::CorruptLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        state.apply(entry);
    }
    Ok(state)
}

impl KgStore {
    pub fn in_memory() -> Self {
        KgStore {
            dir: None,
            log: None,
            state: KgState::default(),
        }
    }

    /// Detached in-memory store over a copy of some state, for readers.
    pub fn from_state(mut state: KgState) -> Self {
        state.reindex();
        KgStore {
            dir: None,
            log: None,
            state,
        }
    }

    /// Open (or create) a store. The snapshot, if present, is loaded and only
    /// log entries past its sequence number are replayed on top.
    pub fn open(dir: &Path) -> Result<Self, KrError> {
        fs::create_dir_all(dir)?;
        let snapshot = dir.join(SNAPSHOT_FILE);
        let mut state = if snapshot.exists() {
            let mut s: KgState = serde_json::from_str(&fs::read_to_string(&snapshot)?)
                .map_err(|e| KrError::Io(format!("snapshot: {e}")))?;
            s.reindex();
            s
        } else {
            KgState::default()
        };
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            for (i, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = serde_json::from_str(&line).map_err(|e| KrError::CorruptLog {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if entry.seq() > state.seq {
                    state.apply(entry);
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(KgStore {
            dir: Some(dir.to_path_buf()),
            log: Some(log),
            state,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn state(&self) -> &KgState {
        &self.state
    }

    fn append(&mut self, make: impl FnOnce(u64) -> LogEntry) -> Result<(), KrError> {
        let entry = make(self.state.seq + 1);
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&entry).expect("log entries serialize");
            writeln!(log, "{line}")?;
        }
        self.state.apply(entry);
        Ok(())
    }

    /// Returns whether the entity was new.
    pub fn add_entity(&mut self, entity: Entity) -> Result<bool, KrError> {
        if self.state.entities.contains(&entity) {
            return Ok(false);
        }
        self.append(|seq| LogEntry::Entity { seq, entity })?;
        Ok(true)
    }

    /// Returns whether the triple was new.
    pub fn add_triple(&mut self, triple: Triple) -> Result<bool, KrError> {
        let (heads, tail) = triple.relation.signature();
        if !heads.contains(&triple.head.kind) || triple.tail.kind != tail {
            return Err(KrError::SignatureViolation {
                relation: triple.relation,
                head: triple.head.kind,
                tail: triple.tail.kind,
            });
        }
        if self.state.has_triple(&triple) {
            return Ok(false);
        }
        for e in [&triple.head, &triple.tail] {
            self.add_entity(e.clone())?;
        }
        self.append(|seq| LogEntry::Triple { seq, triple })?;
        Ok(true)
    }

    /// Returns false if a run with this id is already stored.
    pub fn put_run(&mut self, run: RunRecord) -> Result<bool, KrError> {
        if self.state.runs.contains_key(&run.run_id) {
            return Ok(false);
        }
        self.append(|seq| LogEntry::Run {
            seq,
            run: Box::new(run),
        })?;
        Ok(true)
    }

    pub fn snapshot_json(&self) -> String {
        self.state.to_canonical()
    }

    pub fn write_snapshot(&mut self) -> Result<(), KrError> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
            fs::write(&tmp, self.snapshot_json())?;
            fs::rename(tmp, dir.join(SNAPSHOT_FILE))?;
        }
        Ok(())
    }

    pub fn run(&self, run_id: &str) -> Option<&RunRecord> {
        self.state.runs.get(run_id)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.state.runs.values()
    }

    /// Successful run with exactly this fingerprint, if any.
    pub fn find_ok_by_fingerprint(&self, fingerprint: &str) -> Option<&RunRecord> {
        self.runs()
            .filter(|r| r.fingerprint == fingerprint && r.status == RunStatus::Ok)
            .min_by_key(|r| (r.started_ms, r.run_id.clone()))
    }

    pub fn detect_redundant(&self, fingerprint: &str) -> Redundancy {
        match self
            .runs()
            .filter(|r| r.fingerprint == fingerprint)
            .min_by_key(|r| (r.started_ms, r.run_id.clone()))
        {
            Some(r) => Redundancy::RedundantExact(r.run_id.clone()),
            None => Redundancy::NotRedundant,
        }
    }

    /// Run records matching a query, ordered by run id.
    pub fn lineage(&self, query: &LineageQuery) -> Vec<RunRecord> {
        let runs = self.runs();
        match query {
            LineageQuery::Experiment(exp) => {
                let target = Entity::new(EntityKind::Experiment, exp.clone());
                let linked: BTreeSet<&str> = self
                    .state
                    .triples
                    .iter()
                    .filter(|t| {
                        t.relation == Relation::PartOfExperiment
                            && t.tail == target
                            && t.head.kind == EntityKind::Run
                    })
                    .map(|t| t.head.id.as_str())
                    .collect();
                runs.filter(|r| &r.experiment == exp || linked.contains(r.run_id.as_str()))
                    .cloned()
                    .collect()
            }
            LineageQuery::Dataset(digest) => runs
                .filter(|r| r.input_digests.values().any(|d| d == digest))
                .cloned()
                .collect(),
            LineageQuery::Fingerprint(fp) => runs.filter(|r| &r.fingerprint == fp).cloned().collect(),
        }
    }

    /// Per-configuration statistics of `metric` over successful runs, keyed
    /// by configuration key.
    pub fn history(&self, metric: &str) -> BTreeMap<String, MetricStats> {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in self.runs().filter(|r| r.status == RunStatus::Ok) {
            if let Some(v) = r.metric(metric) {
                values.entry(r.config_key.clone()).or_default().push(v);
            }
        }
        values
            .into_iter()
            .filter_map(|(k, v)| MetricStats::from_values(&v).map(|s| (k, s)))
            .collect()
    }

    /// Number of stored runs of `experiment` with this fingerprint.
    pub fn attempts(&self, experiment: &str, fingerprint: &str) -> usize {
        self.runs()
            .filter(|r| r.experiment == experiment && r.fingerprint == fingerprint)
            .count()
    }

    /// Store a run and link it into the graph. A run id seen before yields
    /// no new triples.
    pub fn ingest_run(
        &mut self,
        record: &RunRecord,
        spec: &ExperimentSpec,
        user: &str,
    ) -> Result<Vec<Triple>, KrError> {
        if !self.put_run(record.clone())? {
            return Ok(Vec::new());
        }
        let run = Entity::new(EntityKind::Run, record.run_id.clone());
        let experiment = Entity::new(EntityKind::Experiment, record.experiment.clone());
        let workflow = Entity::new(EntityKind::Workflow, record.workflow_digest.clone());
        let mut triples = vec![
            Triple::new(run.clone(), Relation::RanBy, Entity::new(EntityKind::User, user)),
            Triple::new(
                experiment.clone(),
                Relation::HasIntent,
                Entity::new(EntityKind::Intent, spec.intent.key()),
            ),
            Triple::new(workflow.clone(), Relation::ProducedRun, run.clone()),
            Triple::new(run.clone(), Relation::PartOfExperiment, experiment.clone()),
            Triple::new(workflow, Relation::PartOfExperiment, experiment),
        ];
        for digest in record.input_digests.values().collect::<BTreeSet<_>>() {
            triples.push(Triple::new(
                run.clone(),
                Relation::UsesDataset,
                Entity::new(EntityKind::Dataset, digest.clone()),
            ));
        }
        for vp in spec.vps.iter().filter(|vp| vp.kind() == VpKind::Implementation) {
            if let Some(v) = record.configuration.get(&vp.name) {
                triples.push(Triple::new(
                    run.clone(),
                    Relation::UsesAlgorithm,
                    Entity::new(EntityKind::Algorithm, v.render()),
                ));
            }
        }
        for (name, value) in &record.metrics {
            triples.push(
                Triple::new(run.clone(), Relation::AchievedMetric, Entity::new(EntityKind::Metric, name.clone()))
                    .with_attr("value", *value),
            );
        }
        let mut added = Vec::new();
        for t in triples {
            if self.add_triple(t.clone())? {
                added.push(t);
            }
        }
        Ok(added)
    }

    /// Associate an existing run with another experiment (a cache hit).
    pub fn link_run_to_experiment(&mut self, run_id: &str, experiment: &str) -> Result<bool, KrError> {
        self.add_triple(Triple::new(
            Entity::new(EntityKind::Run, run_id),
            Relation::PartOfExperiment,
            Entity::new(EntityKind::Experiment, experiment),
        ))
    }

    pub fn record_feedback(&mut self, user: &str, run_id: &str, category: &str, valid: bool) -> Result<bool, KrError> {
        let seq = self
            .state
            .triples
            .iter()
            .filter(|t| t.relation == Relation::GaveFeedback && t.head.id == user)
            .count();
        self.add_triple(
            Triple::new(
                Entity::new(EntityKind::User, user),
                Relation::GaveFeedback,
                Entity::new(EntityKind::Run, run_id),
            )
            .with_attr("category", category)
            .with_attr("valid", if valid { 1.0 } else { 0.0 })
            .with_attr("n", seq as f64),
        )
    }

    pub fn record_proficiency(&mut self, user: &str, algorithm: &str) -> Result<bool, KrError> {
        self.add_triple(Triple::new(
            Entity::new(EntityKind::User, user),
            Relation::HasProficiency,
            Entity::new(EntityKind::Algorithm, algorithm),
        ))
    }

    /// A user's profile rebuilt from stored feedback, oldest answer first.
    pub fn profile_for(&self, user: &str) -> UserProfile {
        let mut profile = UserProfile::new(user);
        for t in &self.state.triples {
            if t.relation == Relation::GaveFeedback && t.head.id == user {
                let category = match t.attrs.get("category") {
                    Some(Value::Text(c)) => c.as_str(),
                    _ => continue,
                };
                if let Some(v) = t.attrs.get("valid").and_then(Value::as_f64) {
                    profile.record(category, v > 0.5);
                }
            } else if t.relation == Relation::HasProficiency && t.head.id == user {
                profile
                    .traits
                    .entry("proficiency".into())
                    .and_modify(|p| {
                        p.push(',');
                        p.push_str(&t.tail.id)
                    })
                    .or_insert_with(|| t.tail.id.clone());
            }
        }
        profile
    }
}
