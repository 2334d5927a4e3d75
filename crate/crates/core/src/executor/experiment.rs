use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    now_ms, run_task, ConstraintOutcome, CostRecord, ExecError, ExecOptions, RunRecord, RunStatus,
    TaskManifest, TaskResult, TaskStatus,
};
use crate::canonical::{file_digest, sha256_hex, to_canonical_json};
use crate::dsl::{check_semantics, ExperimentSpec};
use crate::events::{EventKind, EventSink};
use crate::interaction::{
    question_category, InteractionBudget, InteractionPoint, InteractionSession, Involvement, Prompt,
    Responder, Response, Role, ScheduleDelta, Trigger,
};
use crate::knowledge::KgStore;
use crate::model::{
    configuration_key, expand_configurations, fingerprint_caw, instantiate_caw, Caw, Configuration,
    Direction, MetricScope, TaskKind, BUILTIN_METRICS,
};
use crate::strategy::{plan_static, prune_known_poor, translate_intent, BayesianSearch, StrategySpec};

/// Metric a manual validation task reports: 1 valid, 0 invalid, absent if unknown.
pub const USER_VALID_METRIC: &str = "user_valid";

/// Fields that legitimately differ between repeated executions.
const MASKED_FIELDS: [&str; 7] = [
    "started_ms",
    "finished_ms",
    "cost",
    "total_cost",
    "wall_s",
    "cpu_s",
    "peak_mem_mb",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Completed,
    NoFeasibleConfiguration,
    AbortedByUser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Winner {
    pub run_id: String,
    pub ordinal: usize,
    pub configuration: Configuration,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    History,
    Supervisor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedConfig {
    pub ordinal: usize,
    pub reason: PruneReason,
}

/// What happened at one interaction point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub prompt_id: Option<String>,
    pub trigger: Trigger,
    pub role: Role,
    pub category: String,
    pub involvement: Involvement,
    pub response: Option<Response>,
    pub error: Option<String>,
    pub run_id: Option<String>,
    /// Validator verdict; `None` when skipped or unanswered.
    pub valid: Option<bool>,
    pub charged_min: f64,
    pub used_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub status: ReportStatus,
    pub strategy: StrategySpec,
    /// In completion order.
    pub runs: Vec<RunRecord>,
    pub pruned: Vec<PrunedConfig>,
    pub winner: Option<Winner>,
    pub interactions: Vec<InteractionRecord>,
    pub budget: InteractionBudget,
    pub total_cost: CostRecord,
    pub spawned_processes: usize,
    pub started_ms: u64,
    pub finished_ms: u64,
}

/// Canonical JSON of a report with timing and resource fields nulled, so
/// two executions of the same experiment compare byte for byte.
pub fn canonical_export(report: &ExperimentReport) -> String {
    fn mask(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                // a constraint outcome on a measured metric carries the measurement
                let measured = map
                    .get("constraint")
                    .and_then(|c| c.get("metric"))
                    .and_then(|m| m.as_str())
                    .is_some_and(|m| MASKED_FIELDS.contains(&m));
                if measured {
                    map.insert("value".into(), serde_json::Value::Null);
                }
                for (k, val) in map.iter_mut() {
                    if MASKED_FIELDS.contains(&k.as_str()) {
                        *val = serde_json::Value::Null;
                    } else {
                        mask(val);
                    }
                }
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(mask),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(report).expect("reports serialize");
    mask(&mut v);
    to_canonical_json(&v)
}

/// Configurations still to run.
enum Schedule {
    Static(VecDeque<Configuration>),
    Adaptive {
        search: Box<BayesianSearch>,
        pool: Vec<Configuration>,
        priority: VecDeque<Configuration>,
        issued: usize,
        budget: usize,
    },
}

impl Schedule {
    fn pending(&self) -> Vec<Configuration> {
        match self {
            Schedule::Static(q) => q.iter().cloned().collect(),
            Schedule::Adaptive { pool, priority, .. } => {
                let mut all: Vec<Configuration> = priority.iter().chain(pool.iter()).cloned().collect();
                all.sort_by_key(|c| c.ordinal);
                all
            }
        }
    }

    fn pending_ordinals(&self) -> Vec<usize> {
        self.pending().iter().map(|c| c.ordinal).collect()
    }

    /// Next configuration to start, or `None` if the schedule is exhausted or
    /// (for the adaptive case) must wait for running evaluations.
    fn next(&mut self, in_flight: usize) -> Result<Option<Configuration>, ExecError> {
        match self {
            Schedule::Static(q) => Ok(q.pop_front()),
            Schedule::Adaptive {
                search,
                pool,
                priority,
                issued,
                budget,
            } => {
                if *issued >= *budget {
                    return Ok(None);
                }
                let chosen = if let Some(c) = priority.pop_front() {
                    c
                } else if pool.is_empty() || (!search.in_warmup() && in_flight > 0) {
                    return Ok(None);
                } else {
                    let c = search.propose(pool)?;
                    pool.retain(|p| p.ordinal != c.ordinal);
                    c
                };
                *issued += 1;
                Ok(Some(chosen))
            }
        }
    }

    fn observe(&mut self, config: &Configuration, value: Option<f64>) {
        if let Schedule::Adaptive { search, .. } = self {
            search.observe(config, value);
        }
    }

    fn prune(&mut self, ordinals: &BTreeSet<usize>) {
        match self {
            Schedule::Static(q) => q.retain(|c| !ordinals.contains(&c.ordinal)),
            Schedule::Adaptive { pool, priority, .. } => {
                pool.retain(|c| !ordinals.contains(&c.ordinal));
                priority.retain(|c| !ordinals.contains(&c.ordinal));
            }
        }
    }

    /// Move the given configurations to the front, in the order given.
    fn prioritize(&mut self, ordinals: &[usize]) {
        let take = |from: &mut VecDeque<Configuration>| -> Vec<Configuration> {
            ordinals
                .iter()
                .filter_map(|o| from.iter().position(|c| c.ordinal == *o).and_then(|i| from.remove(i)))
                .collect()
        };
        match self {
            Schedule::Static(q) => {
                for c in take(q).into_iter().rev() {
                    q.push_front(c);
                }
            }
            Schedule::Adaptive { pool, priority, .. } => {
                let mut from_pool: VecDeque<Configuration> = pool.drain(..).collect();
                let mut picked = take(priority);
                picked.extend(take(&mut from_pool));
                picked.sort_by_key(|c| ordinals.iter().position(|o| *o == c.ordinal));
                *pool = from_pool.into();
                for c in picked.into_iter().rev() {
                    priority.push_front(c);
                }
            }
        }
    }
}

/// The human side of an experiment: budget, profile and whoever answers.
struct Human<'r> {
    session: InteractionSession,
    responder: &'r mut dyn Responder,
    opened: usize,
    log: Vec<InteractionRecord>,
    /// Real validator answers not yet written to the repository.
    feedback: Vec<(String, String, bool)>,
}

struct Ask<'a> {
    experiment: &'a str,
    point: InteractionPoint,
    category: String,
    pending: Vec<usize>,
    payload: serde_json::Value,
    run_id: Option<&'a str>,
}

impl Human<'_> {
    fn interact(&mut self, ask: Ask<'_>, events: &dyn EventSink) -> (ScheduleDelta, Option<bool>, f64) {
        let involvement = self.session.decide(&ask.point, &ask.category);
        let before = self.session.budget.used_min;
        let mut record = InteractionRecord {
            prompt_id: None,
            trigger: ask.point.trigger.clone(),
            role: ask.point.role,
            category: ask.category.clone(),
            involvement,
            response: None,
            error: None,
            run_id: ask.run_id.map(str::to_string),
            valid: None,
            charged_min: 0.0,
            used_min: before,
        };
        let mut delta = ScheduleDelta::None;
        match involvement {
            Involvement::AutoAnswer { answer, .. } => record.valid = Some(answer),
            Involvement::Skip => {}
            Involvement::Involve => {
                self.opened += 1;
                let prompt = Prompt {
                    id: format!("{}-p{}", ask.experiment, self.opened),
                    experiment: ask.experiment.to_string(),
                    role: ask.point.role,
                    cost_min: ask.point.cost_min,
                    category: ask.category.clone(),
                    pending: ask.pending,
                    payload: ask.payload,
                };
                record.prompt_id = Some(prompt.id.clone());
                self.session.open(prompt.clone());
                events.emit(ask.experiment, EventKind::PromptOpened, json!(prompt));
                match self.responder.respond(&prompt) {
                    None => {
                        self.session.abandon(&prompt.id);
                        record.error = Some("no response".into());
                    }
                    Some(response) => match self.session.resolve(&prompt.id, &response) {
                        Ok(d) => {
                            delta = d;
                            if let Response::Validate { valid, .. } = response {
                                record.valid = Some(valid);
                                if let Some(run) = ask.run_id {
                                    self.feedback.push((run.to_string(), ask.category.clone(), valid));
                                }
                            }
                            record.response = Some(response);
                        }
                        Err(e) => {
                            self.session.abandon(&prompt.id);
                            record.error = Some(e.to_string());
                            record.response = Some(response);
                        }
                    },
                }
            }
        }
        record.used_min = self.session.budget.used_min;
        record.charged_min = record.used_min - before;
        events.emit(ask.experiment, EventKind::PromptResolved, json!(record));
        let out = (delta, record.valid, record.charged_min);
        self.log.push(record);
        out
    }
}

/// Runs experiments against one run store.
pub struct Executor {
    options: ExecOptions,
    spawned: AtomicUsize,
}

fn run_id_for(experiment: &str, fingerprint: &str, attempt: usize) -> String {
    let h = sha256_hex(format!("{experiment}\n{fingerprint}\n{attempt}").as_bytes());
    format!("r-{}", &h[..12])
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Executor {
    pub fn new(mut options: ExecOptions) -> Self {
        options.store = absolute(&options.store);
        options.base_dir = absolute(&options.base_dir);
        Executor {
            options,
            spawned: AtomicUsize::new(0),
        }
    }

    pub fn options(&self) -> &ExecOptions {
        &self.options
    }

    /// Task processes started so far by this executor.
    pub fn spawned_processes(&self) -> usize {
        self.spawned.load(Ordering::SeqCst)
    }

    fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.options.base_dir.join(p)
        }
    }

    /// Content digests of every dataset any configuration reads.
    fn input_digests(&self, caws: &[Caw]) -> Result<BTreeMap<String, String>, ExecError> {
        let mut digests = BTreeMap::new();
        for caw in caws {
            for t in &caw.workflow.tasks {
                for r in t.inputs.values() {
                    if !digests.contains_key(r) {
                        let d = file_digest(&self.resolve(r)).map_err(|source| ExecError::MissingInput {
                            reference: r.clone(),
                            source,
                        })?;
                        digests.insert(r.clone(), d);
                    }
                }
            }
        }
        Ok(digests)
    }

    fn metric_allowed(spec: &ExperimentSpec, task: &str, metric: &str) -> bool {
        BUILTIN_METRICS.contains(&metric)
            || spec.metrics.iter().any(|m| {
                m.name == metric
                    && match &m.scope {
                        MetricScope::Workflow => true,
                        MetricScope::Task(t) | MetricScope::Output(t) => t == task,
                    }
            })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_manual(
        &self,
        spec: &ExperimentSpec,
        caw: &Caw,
        task: &str,
        run_id: &str,
        upstream: &BTreeMap<String, String>,
        human: &Mutex<Human<'_>>,
        events: &dyn EventSink,
    ) -> TaskResult {
        let ask = Ask {
            experiment: &spec.name,
            point: InteractionPoint::manual_task(task),
            category: question_category(&spec.workflow.digest(), task, "manual-task"),
            pending: Vec::new(),
            payload: json!({
                "question": format!("Is the output reaching `{task}` valid?"),
                "run_id": run_id,
                "configuration": caw.config,
                "inputs": upstream,
            }),
            run_id: Some(run_id),
        };
        let (_, valid, charged) = human.lock().expect("interaction state poisoned").interact(ask, events);
        let mut result = TaskResult::skipped(task);
        result.status = TaskStatus::Ok;
        result.cost.interaction_min = charged;
        if let Some(v) = valid {
            result.metrics.insert(USER_VALID_METRIC.into(), if v { 1.0 } else { 0.0 });
        }
        result
    }

    /// Execute one concrete workflow, task by task in topological order.
    /// Tasks downstream of anything that did not succeed are skipped.
    fn run_caw(
        &self,
        spec: &ExperimentSpec,
        caw: &Caw,
        run_id: String,
        digests: &BTreeMap<String, String>,
        human: &Mutex<Human<'_>>,
        events: &dyn EventSink,
    ) -> RunRecord {
        let started_ms = now_ms();
        let start = Instant::now();
        let store = &self.options.store;
        let run_dir = store.join("runs").join(&spec.name).join(&run_id);
        let _ = fs::remove_dir_all(&run_dir);
        let order = caw
            .workflow
            .topological_order()
            .expect("validated workflows are acyclic");

        let mut results: BTreeMap<String, TaskResult> = BTreeMap::new();
        let mut ordered: Vec<String> = Vec::new();
        for task in order {
            let name = task.name.as_str();
            let preds = caw.workflow.predecessors(name);
            let blocked = preds
                .iter()
                .any(|p| results.get(*p).is_none_or(|r| r.status != TaskStatus::Ok));
            let mut upstream = BTreeMap::new();
            for p in &preds {
                if let Some(r) = results.get(*p) {
                    for (out, rel) in &r.outputs {
                        upstream.insert(format!("{p}.{out}"), rel.clone());
                    }
                }
            }
            let result = if blocked {
                TaskResult::skipped(name)
            } else if task.kind == TaskKind::Manual {
                self.run_manual(spec, caw, name, &run_id, &upstream, human, events)
            } else {
                let mut inputs: BTreeMap<String, PathBuf> =
                    task.inputs.iter().map(|(k, r)| (k.clone(), self.resolve(r))).collect();
                inputs.extend(upstream.iter().map(|(k, rel)| (k.clone(), store.join(rel))));
                let manifest = TaskManifest {
                    task: name.to_string(),
                    params: task.params.clone(),
                    inputs,
                    deployment: caw.deployment_labels.get(name).cloned(),
                    output_dir: run_dir.join(name),
                };
                let mut t = task.clone();
                if let Some(limit) = self.options.task_timeout_s {
                    t.timeout_s = limit;
                }
                self.spawned.fetch_add(1, Ordering::SeqCst);
                let mut r = run_task(&t, &manifest, &self.options.base_dir);
                r.metrics.retain(|k, _| {
                    let keep = Self::metric_allowed(spec, name, k);
                    if !keep {
                        tracing::debug!(task = name, metric = %k, "dropping undeclared metric");
                    }
                    keep
                });
                r.outputs = r
                    .outputs
                    .into_iter()
                    .map(|(k, abs)| {
                        let rel = Path::new(&abs)
                            .strip_prefix(store)
                            .map(|p| p.to_string_lossy().into_owned())
                            .unwrap_or(abs);
                        (k, rel)
                    })
                    .collect();
                r
            };
            ordered.push(name.to_string());
            results.insert(name.to_string(), result);
        }
        let tasks: Vec<TaskResult> = ordered.iter().map(|n| results[n].clone()).collect();

        let task_cost = tasks
            .iter()
            .fold(CostRecord::default(), |acc, t| acc.combine(&t.cost));
        let cost = CostRecord {
            wall_s: start.elapsed().as_secs_f64(),
            ..task_cost
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("wall_s".to_string(), cost.wall_s);
        metrics.insert("cpu_s".to_string(), cost.cpu_s);
        if let Some(m) = cost.peak_mem_mb {
            metrics.insert("peak_mem_mb".to_string(), m);
        }
        for m in spec.metrics.iter().filter(|m| !BUILTIN_METRICS.contains(&m.name.as_str())) {
            let value = match &m.scope {
                MetricScope::Workflow => tasks.iter().rev().find_map(|t| t.metrics.get(&m.name)),
                MetricScope::Task(t) | MetricScope::Output(t) => {
                    results.get(t).and_then(|r| r.metrics.get(&m.name))
                }
            };
            if let Some(v) = value {
                metrics.insert(m.name.clone(), *v);
            }
        }
        if let Some(v) = tasks.iter().rev().find_map(|t| t.metrics.get(USER_VALID_METRIC)) {
            metrics.insert(USER_VALID_METRIC.to_string(), *v);
        }
        let verdicts = spec
            .constraints
            .iter()
            .map(|c| {
                let value = metrics.get(&c.metric).copied();
                ConstraintOutcome {
                    constraint: c.clone(),
                    value,
                    verdict: c.check(value),
                }
            })
            .collect();
        let status = if tasks.iter().all(|t| t.status == TaskStatus::Ok) {
            RunStatus::Ok
        } else {
            RunStatus::Failed
        };
        RunRecord {
            run_id,
            experiment: spec.name.clone(),
            fingerprint: caw.id.clone().unwrap_or_default(),
            config_key: configuration_key(&spec.workflow, &caw.config),
            workflow_digest: spec.workflow.digest(),
            configuration: caw.config.clone(),
            deployment: caw.deployment_labels.clone(),
            input_digests: caw
                .workflow
                .tasks
                .iter()
                .flat_map(|t| t.inputs.values())
                .filter_map(|r| digests.get(r).map(|d| (r.clone(), d.clone())))
                .collect(),
            status,
            tasks,
            metrics,
            verdicts,
            cost,
            cache_hit: false,
            started_ms,
            finished_ms: now_ms(),
        }
    }

    /// Run an experiment to completion (or until the user aborts it).
    ///
    /// The strategy proposes configurations; each is fingerprinted and served
    /// from the repository if an identical successful run exists, otherwise
    /// executed on one of `workers` threads. After every completion the
    /// record is stored and due checkpoints are handled before anything new
    /// is started.
    pub fn run_experiment(
        &self,
        spec: &ExperimentSpec,
        kr: &mut KgStore,
        responder: &mut dyn Responder,
        events: &dyn EventSink,
    ) -> Result<ExperimentReport, ExecError> {
        let report = check_semantics(spec);
        if !report.is_ok() {
            let msgs: Vec<String> = report.issues.iter().map(ToString::to_string).collect();
            return Err(ExecError::InvalidSpec(msgs.join("; ")));
        }
        let started_ms = now_ms();
        let spawned_before = self.spawned_processes();
        let mut strategy = translate_intent(&spec.intent, Some(spec.strategy.clone()), spec.space_size())?;
        if let Some(seed) = self.options.seed {
            strategy = strategy.with_seed(seed);
        }
        let direction = spec.intent.direction;
        let configs = expand_configurations(&spec.vps)?;
        let caws = configs
            .iter()
            .map(|c| instantiate_caw(&spec.workflow, &spec.vps, c))
            .collect::<Result<Vec<_>, _>>()?;
        let digests = self.input_digests(&caws)?;

        let mut schedule = match &self.options.plan {
            Some(plan) => Schedule::Static(plan.iter().filter_map(|o| configs.get(*o).cloned()).collect()),
            None if strategy.is_static() => Schedule::Static(plan_static(&strategy, &configs)?.into()),
            None => Schedule::Adaptive {
                search: Box::new(BayesianSearch::new(&spec.vps, &strategy, direction)),
                pool: configs.clone(),
                priority: VecDeque::new(),
                issued: 0,
                budget: strategy.budget(configs.len()),
            },
        };
        let mut pruned_log = Vec::new();
        if self.options.prune_history {
            let history = kr.history(&spec.intent.metric);
            let (_, pruned) = prune_known_poor(
                &schedule.pending(),
                &history,
                |c| configuration_key(&spec.workflow, c),
                direction,
                self.options.prune_quantile,
            );
            if !pruned.is_empty() {
                let ords: BTreeSet<usize> = pruned.iter().map(|c| c.ordinal).collect();
                schedule.prune(&ords);
                pruned_log.extend(ords.iter().map(|o| PrunedConfig {
                    ordinal: *o,
                    reason: PruneReason::History,
                }));
                events.emit(&spec.name, EventKind::SchedulePruned, json!({"reason": "history", "configs": ords}));
            }
        }

        let user = self.options.user.clone();
        let human = Mutex::new(Human {
            session: InteractionSession::new(spec.interaction.budget_min, kr.profile_for(&user)),
            responder,
            opened: 0,
            log: Vec::new(),
            feedback: Vec::new(),
        });
        let workers = self.options.workers.max(1);
        let last_task = spec
            .workflow
            .topological_order()
            .and_then(|o| o.last().map(|t| t.name.clone()))
            .unwrap_or_default();
        let wf_digest = spec.workflow.digest();

        let mut runs: Vec<RunRecord> = Vec::new();
        let mut aborted = false;

        let mut on_finished = |rec: RunRecord,
                               schedule: &mut Schedule,
                               kr: &mut KgStore,
                               runs: &mut Vec<RunRecord>,
                               aborted: &mut bool|
         -> Result<(), ExecError> {
            if !rec.cache_hit {
                kr.ingest_run(&rec, spec, &user)?;
            }
            let value = (rec.status == RunStatus::Ok)
                .then(|| rec.metric(&spec.intent.metric))
                .flatten();
            schedule.observe(&rec.configuration, value);
            events.emit(&spec.name, EventKind::RunFinished, json!(rec));
            runs.push(rec.clone());
            let completed = runs.len();
            let due: Vec<_> = spec.interaction.due(completed).cloned().collect();
            for cp in due {
                if *aborted {
                    break;
                }
                let (category, payload) = match cp.role {
                    Role::Supervisor => (
                        question_category(&wf_digest, "*", "supervise"),
                        overview(runs, &spec.intent.metric, direction),
                    ),
                    Role::Validator => (
                        question_category(&wf_digest, &last_task, "validate-output"),
                        json!({"question": "Are these predictions accurate?", "run": rec}),
                    ),
                };
                let ask = Ask {
                    experiment: &spec.name,
                    point: InteractionPoint::from_checkpoint(&cp),
                    category,
                    pending: schedule.pending_ordinals(),
                    payload,
                    run_id: Some(&rec.run_id),
                };
                let (delta, _, _) = human.lock().expect("interaction state poisoned").interact(ask, events);
                match delta {
                    ScheduleDelta::None => {}
                    ScheduleDelta::Abort => *aborted = true,
                    ScheduleDelta::Prune(ords) => {
                        let set: BTreeSet<usize> = ords.iter().copied().collect();
                        schedule.prune(&set);
                        pruned_log.extend(set.iter().map(|o| PrunedConfig {
                            ordinal: *o,
                            reason: PruneReason::Supervisor,
                        }));
                        events.emit(&spec.name, EventKind::SchedulePruned, json!({"reason": "supervisor", "configs": set}));
                    }
                    ScheduleDelta::Prioritize(ords) => schedule.prioritize(&ords),
                }
            }
            let feedback = std::mem::take(&mut human.lock().expect("interaction state poisoned").feedback);
            for (run, category, valid) in feedback {
                kr.record_feedback(&user, &run, &category, valid)?;
            }
            Ok(())
        };

        std::thread::scope(|scope| -> Result<(), ExecError> {
            let (tx, rx) = mpsc::channel::<RunRecord>();
            let mut in_flight = 0usize;
            loop {
                while !aborted && in_flight < workers {
                    let Some(config) = schedule.next(in_flight)? else {
                        break;
                    };
                    let mut caw = caws[config.ordinal].clone();
                    let fp = fingerprint_caw(&caw, &digests)?;
                    caw.id = Some(fp.clone());
                    events.emit(
                        &spec.name,
                        EventKind::RunStarted,
                        json!({"ordinal": config.ordinal, "configuration": config, "fingerprint": fp}),
                    );
                    if let Some(hit) = kr.find_ok_by_fingerprint(&fp).cloned() {
                        kr.link_run_to_experiment(&hit.run_id, &spec.name)?;
                        let rec = RunRecord {
                            cache_hit: true,
                            ..hit
                        };
                        on_finished(rec, &mut schedule, kr, &mut runs, &mut aborted)?;
                        continue;
                    }
                    let run_id = run_id_for(&spec.name, &fp, kr.attempts(&spec.name, &fp));
                    in_flight += 1;
                    let tx = tx.clone();
                    let (human, digests) = (&human, &digests);
                    scope.spawn(move || {
                        let rec = self.run_caw(spec, &caw, run_id, digests, human, events);
                        let _ = tx.send(rec);
                    });
                }
                if in_flight == 0 {
                    break;
                }
                let rec = rx.recv().expect("workers report before exiting");
                in_flight -= 1;
                on_finished(rec, &mut schedule, kr, &mut runs, &mut aborted)?;
            }
            Ok(())
        })?;

        let human = human.into_inner().expect("interaction state poisoned");
        let winner = runs
            .iter()
            .filter(|r| r.feasible())
            .filter_map(|r| r.metric(&spec.intent.metric).map(|v| (r, v)))
            .fold(None::<(&RunRecord, f64)>, |best, (r, v)| match best {
                Some((b, bv))
                    if !direction.better(v, bv)
                        && !(v == bv && r.configuration.ordinal < b.configuration.ordinal) =>
                {
                    Some((b, bv))
                }
                _ => Some((r, v)),
            })
            .map(|(r, v)| Winner {
                run_id: r.run_id.clone(),
                ordinal: r.configuration.ordinal,
                configuration: r.configuration.clone(),
                value: v,
            });
        let status = if aborted {
            ReportStatus::AbortedByUser
        } else if winner.is_none() {
            ReportStatus::NoFeasibleConfiguration
        } else {
            ReportStatus::Completed
        };
        let mut total_cost = runs
            .iter()
            .filter(|r| !r.cache_hit)
            .fold(CostRecord::default(), |acc, r| acc.combine(&r.cost));
        total_cost.interaction_min = human.session.budget.used_min;

        let report = ExperimentReport {
            experiment: spec.name.clone(),
            status,
            strategy,
            runs,
            pruned: pruned_log,
            winner,
            interactions: human.log,
            budget: human.session.budget,
            total_cost,
            spawned_processes: self.spawned_processes() - spawned_before,
            started_ms,
            finished_ms: now_ms(),
        };
        kr.write_snapshot()?;
        let exp_dir = self.options.store.join("runs").join(&spec.name);
        fs::create_dir_all(&exp_dir)?;
        fs::write(
            exp_dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("reports serialize"),
        )?;
        events.emit(
            &spec.name,
            EventKind::ExperimentFinished,
            json!({
                "status": report.status,
                "winner": report.winner,
                "runs": report.runs.len(),
                "budget": report.budget,
            }),
        );
        Ok(report)
    }
}

/// Results so far, as shown to a supervisor.
fn overview(runs: &[RunRecord], metric: &str, direction: Direction) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| {
            json!({
                "run_id": r.run_id,
                "ordinal": r.configuration.ordinal,
                "configuration": r.configuration.label(),
                "status": r.status,
                "feasible": r.feasible(),
                metric: r.metric(metric),
            })
        })
        .collect();
    let best = runs
        .iter()
        .filter(|r| r.feasible())
        .filter_map(|r| r.metric(metric))
        .fold(None::<f64>, |b, v| match b {
            Some(b) if !direction.better(v, b) => Some(b),
            _ => Some(v),
        });
    json!({"runs": rows, "best": best})
}
