//! Engine state behind the HTTP facade.
//!
//! Every experiment is executed by one scheduler thread that owns the
//! knowledge repository. Request handlers only read published snapshots and
//! talk to the scheduler through its job queue or through open prompts.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use tokio::sync::broadcast;

use xpflow_core::events::{Event, EventKind, EventLog, EventSink};
use xpflow_core::executor::{
    evaluate_retraining_trigger, reexecution_plan, ExecOptions, Executor, ExperimentReport, RunRecord,
    TriggerDecision,
};
use xpflow_core::interaction::{validate_response, InteractionError, Prompt, Responder, Response};
use xpflow_core::knowledge::{train_embeddings, EmbeddingTable, KgStore, KrError};
use xpflow_core::model::expand_configurations;
use xpflow_core::ExperimentSpec;

/// Quantile below which history prunes configurations from a re-execution.
pub const RETRAIN_QUANTILE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub store: PathBuf,
    /// Directory relative task commands and datasets resolve against.
    pub base_dir: PathBuf,
    pub workers: usize,
    pub user: String,
    /// How long an open prompt waits before it counts as unanswered.
    pub prompt_timeout: Duration,
}

impl AppConfig {
    pub fn new(store: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Self {
        AppConfig {
            store: store.into(),
            base_dir: base_dir.into(),
            workers: 1,
            user: "anonymous".into(),
            prompt_timeout: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Queued,
    Running,
    Finished,
    Failed,
}

/// What GET endpoints show about an experiment. Updated only after the
/// event describing the change has been logged.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentView {
    pub id: String,
    pub phase: Phase,
    pub runs: Vec<RunRecord>,
    pub pending_prompt: Option<Prompt>,
    pub report: Option<ExperimentReport>,
    pub error: Option<String>,
    /// Experiment this one re-executes, if any.
    pub origin: Option<String>,
    pub production: ProductionState,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProductionState {
    pub values: Vec<f64>,
    pub new_data: u64,
    pub retrains: Vec<String>,
}

pub struct Experiment {
    pub spec: ExperimentSpec,
    pub events: EventLog,
    pub view: Mutex<ExperimentView>,
}

impl Experiment {
    pub fn snapshot(&self) -> ExperimentView {
        self.view.lock().expect("view poisoned").clone()
    }
}

enum PromptState {
    Open(mpsc::Sender<Response>),
    Closed,
}

struct PromptSlot {
    prompt: Prompt,
    state: PromptState,
}

#[derive(Debug, PartialEq)]
pub enum AnswerError {
    UnknownPrompt,
    AlreadyResolved,
    Invalid(InteractionError),
}

#[derive(Debug, PartialEq)]
pub enum SubmitError {
    Duplicate(String),
}

#[derive(Debug)]
pub enum ProductionError {
    UnknownExperiment,
    NotMonitored(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductionAck {
    pub decision: TriggerDecision,
    /// Id of the re-execution experiment enqueued by a trigger.
    pub retrain: Option<String>,
}

enum Job {
    Run { id: String },
    Retrain { id: String, origin: String },
}

pub struct Inner {
    pub config: AppConfig,
    experiments: Mutex<BTreeMap<String, Arc<Experiment>>>,
    prompts: Mutex<HashMap<String, PromptSlot>>,
    /// Receiving ends of open prompts, picked up by the waiting responder.
    inboxes: Mutex<HashMap<String, mpsc::Receiver<Response>>>,
    live: broadcast::Sender<Event>,
    jobs: Mutex<mpsc::Sender<Job>>,
    kr_view: RwLock<Arc<KgStore>>,
    embeddings: Mutex<Option<(u64, Arc<EmbeddingTable>)>>,
}

/// Cheap handle shared by all handlers.
#[derive(Clone)]
pub struct App(Arc<Inner>);

impl std::ops::Deref for App {
    type Target = Inner;
    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl App {
    /// Open the store and start the scheduler thread.
    pub fn start(config: AppConfig) -> Result<App, KrError> {
        let kr = KgStore::open(&config.store.join("kr"))?;
        let view = Arc::new(KgStore::from_state(kr.state().clone()));
        let (tx, rx) = mpsc::channel();
        let (live, _) = broadcast::channel(1024);
        let app = App(Arc::new(Inner {
            config,
            experiments: Mutex::default(),
            prompts: Mutex::default(),
            inboxes: Mutex::default(),
            live,
            jobs: Mutex::new(tx),
            kr_view: RwLock::new(view),
            embeddings: Mutex::default(),
        }));
        let worker = app.clone();
        std::thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || worker.schedule(kr, rx))
            .expect("scheduler thread starts");
        Ok(app)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.live.subscribe()
    }

    pub fn experiment(&self, id: &str) -> Option<Arc<Experiment>> {
        self.experiments.lock().expect("registry poisoned").get(id).cloned()
    }

    pub fn experiments(&self) -> Vec<Arc<Experiment>> {
        self.experiments.lock().expect("registry poisoned").values().cloned().collect()
    }

    /// Register a checked spec and queue it. The experiment name is its id.
    pub fn submit(&self, spec: ExperimentSpec) -> Result<String, SubmitError> {
        let id = spec.name.clone();
        self.register(spec, None)?;
        self.enqueue(Job::Run { id: id.clone() });
        Ok(id)
    }

    fn register(&self, spec: ExperimentSpec, origin: Option<String>) -> Result<Arc<Experiment>, SubmitError> {
        let mut registry = self.experiments.lock().expect("registry poisoned");
        if registry.contains_key(&spec.name) {
            return Err(SubmitError::Duplicate(spec.name.clone()));
        }
        let id = spec.name.clone();
        let exp = Arc::new(Experiment {
            spec,
            events: EventLog::new(),
            view: Mutex::new(ExperimentView {
                id: id.clone(),
                phase: Phase::Queued,
                runs: Vec::new(),
                pending_prompt: None,
                report: None,
                error: None,
                origin,
                production: ProductionState::default(),
            }),
        });
        registry.insert(id, exp.clone());
        Ok(exp)
    }

    fn enqueue(&self, job: Job) {
        if self.jobs.lock().expect("queue poisoned").send(job).is_err() {
            tracing::error!("scheduler is gone; job dropped");
        }
    }

    /// Log an event for `id`, fold it into the view, then broadcast it.
    pub fn emit(&self, id: &str, kind: EventKind, payload: serde_json::Value) {
        let Some(exp) = self.experiment(id) else {
            tracing::warn!(experiment = id, ?kind, "event for unknown experiment");
            return;
        };
        if kind == EventKind::PromptOpened {
            // answerable before anyone can learn about it
            match serde_json::from_value::<Prompt>(payload.clone()) {
                Ok(prompt) => self.open_prompt(prompt),
                Err(e) => tracing::warn!("unreadable prompt event: {e}"),
            }
        }
        let event = exp.events.push(id, kind, payload);
        {
            let mut view = exp.view.lock().expect("view poisoned");
            match kind {
                EventKind::RunFinished => match serde_json::from_value(event.payload.clone()) {
                    Ok(run) => view.runs.push(run),
                    Err(e) => tracing::warn!("unreadable run event: {e}"),
                },
                EventKind::PromptOpened => view.pending_prompt = serde_json::from_value(event.payload.clone()).ok(),
                EventKind::PromptResolved => {
                    let resolved = event.payload.get("prompt_id").and_then(|p| p.as_str());
                    if view.pending_prompt.as_ref().map(|p| p.id.as_str()) == resolved {
                        view.pending_prompt = None;
                    }
                }
                _ => {}
            }
        }
        // nobody listening is fine
        let _ = self.live.send(event);
    }

    fn open_prompt(&self, prompt: Prompt) {
        let (tx, rx) = mpsc::channel();
        let id = prompt.id.clone();
        self.inboxes.lock().expect("inboxes poisoned").insert(id.clone(), rx);
        self.prompts.lock().expect("prompts poisoned").insert(
            id,
            PromptSlot {
                prompt,
                state: PromptState::Open(tx),
            },
        );
    }

    /// Forward a response to the scheduler waiting on prompt `id`.
    pub fn answer(&self, id: &str, response: Response) -> Result<(), AnswerError> {
        let mut prompts = self.prompts.lock().expect("prompts poisoned");
        let slot = prompts.get_mut(id).ok_or(AnswerError::UnknownPrompt)?;
        let PromptState::Open(tx) = &slot.state else {
            return Err(AnswerError::AlreadyResolved);
        };
        validate_response(&slot.prompt, &response).map_err(AnswerError::Invalid)?;
        if tx.send(response).is_err() {
            slot.state = PromptState::Closed;
            return Err(AnswerError::AlreadyResolved);
        }
        slot.state = PromptState::Closed;
        Ok(())
    }

    /// Record production observations and re-run the experiment if they
    /// call for it.
    pub fn ingest_production(
        &self,
        id: &str,
        metric: Option<&str>,
        values: &[f64],
        new_data: u64,
    ) -> Result<ProductionAck, ProductionError> {
        let exp = self.experiment(id).ok_or(ProductionError::UnknownExperiment)?;
        let monitor = exp
            .spec
            .monitor
            .clone()
            .ok_or_else(|| ProductionError::NotMonitored(metric.unwrap_or("").to_string()))?;
        if let Some(m) = metric {
            if m != monitor.metric {
                return Err(ProductionError::NotMonitored(m.to_string()));
            }
        }
        let (decision, retrain_no) = {
            let mut view = exp.view.lock().expect("view poisoned");
            let prod = &mut view.production;
            prod.values.extend_from_slice(values);
            prod.new_data += new_data;
            let decision =
                evaluate_retraining_trigger(&monitor, &prod.values, prod.new_data, exp.spec.intent.direction);
            if decision == TriggerDecision::NoTrigger {
                return Ok(ProductionAck { decision, retrain: None });
            }
            // evidence that caused a trigger is not reused for the next one
            prod.values.clear();
            prod.new_data = 0;
            (decision, prod.retrains.len() + 1)
        };

        let mut spec = exp.spec.clone();
        spec.name = format!("{id}-retrain-{retrain_no}");
        let retrain_id = spec.name.clone();
        if self.register(spec, Some(id.to_string())).is_err() {
            tracing::warn!(experiment = %retrain_id, "re-execution already registered");
        }
        exp.view.lock().expect("view poisoned").production.retrains.push(retrain_id.clone());
        self.emit(id, EventKind::TriggerFired, json!({"decision": decision, "retrain": retrain_id}));
        self.enqueue(Job::Retrain {
            id: retrain_id.clone(),
            origin: id.to_string(),
        });
        Ok(ProductionAck {
            decision,
            retrain: Some(retrain_id),
        })
    }

    /// Repository snapshot published after the last finished experiment.
    pub fn kr(&self) -> Arc<KgStore> {
        self.kr_view.read().expect("kr view poisoned").clone()
    }

    /// Embeddings of the current snapshot, trained at most once per snapshot.
    pub fn embeddings(&self) -> Result<Arc<EmbeddingTable>, KrError> {
        let kr = self.kr();
        let seq = kr.state().seq;
        let mut cache = self.embeddings.lock().expect("embedding cache poisoned");
        if let Some((s, t)) = cache.as_ref() {
            if *s == seq {
                return Ok(t.clone());
            }
        }
        let table = Arc::new(train_embeddings(kr.state(), 0)?);
        *cache = Some((seq, table.clone()));
        Ok(table)
    }

    fn schedule(self, mut kr: KgStore, jobs: mpsc::Receiver<Job>) {
        for job in jobs {
            let (id, origin) = match job {
                Job::Run { id } => (id, None),
                Job::Retrain { id, origin } => (id, Some(origin)),
            };
            let Some(exp) = self.experiment(&id) else { continue };
            exp.view.lock().expect("view poisoned").phase = Phase::Running;
            let outcome = self.execute(&exp, origin.as_deref(), &mut kr);
            // publish first so a client that sees the phase change also sees the runs
            *self.kr_view.write().expect("kr view poisoned") = Arc::new(KgStore::from_state(kr.state().clone()));
            let mut view = exp.view.lock().expect("view poisoned");
            match outcome {
                Ok(report) => {
                    view.phase = Phase::Finished;
                    view.report = Some(report);
                }
                Err(msg) => {
                    drop(view);
                    self.emit(&id, EventKind::ExperimentFinished, json!({"status": "failed", "error": msg}));
                    view = exp.view.lock().expect("view poisoned");
                    view.phase = Phase::Failed;
                    view.error = Some(msg);
                }
            }
        }
    }

    fn execute(&self, exp: &Experiment, origin: Option<&str>, kr: &mut KgStore) -> Result<ExperimentReport, String> {
        let mut options = ExecOptions::new(&self.config.store, &self.config.base_dir);
        options.workers = self.config.workers;
        options.user = self.config.user.clone();
        if let Some(origin) = origin {
            let original: Vec<usize> = match self.experiment(origin).and_then(|o| o.snapshot().report) {
                Some(r) => r.runs.iter().map(|run| run.configuration.ordinal).collect(),
                None => (0..expand_configurations(&exp.spec.vps).map_err(|e| e.to_string())?.len()).collect(),
            };
            let (kept, pruned) =
                reexecution_plan(&exp.spec, &original, kr, RETRAIN_QUANTILE).map_err(|e| e.to_string())?;
            let pruned: Vec<usize> = pruned.iter().map(|c| c.ordinal).collect();
            if !pruned.is_empty() {
                self.emit(&exp.spec.name, EventKind::SchedulePruned, json!({"reason": "history", "configs": pruned}));
            }
            options.plan = Some(kept.iter().map(|c| c.ordinal).collect());
        }
        let executor = Executor::new(options);
        let mut responder = HttpResponder { app: self.clone() };
        let sink = Sink { app: self.clone() };
        executor
            .run_experiment(&exp.spec, kr, &mut responder, &sink)
            .map_err(|e| e.to_string())
    }
}

struct Sink {
    app: App,
}

impl EventSink for Sink {
    fn emit(&self, experiment: &str, kind: EventKind, payload: serde_json::Value) {
        self.app.emit(experiment, kind, payload);
    }
}

/// Waits for an answer posted to `/prompts/{id}/response`.
struct HttpResponder {
    app: App,
}

impl Responder for HttpResponder {
    fn respond(&mut self, prompt: &Prompt) -> Option<Response> {
        let inbox = self.app.inboxes.lock().expect("inboxes poisoned").remove(&prompt.id);
        let rx = match inbox {
            Some(rx) => rx,
            None => {
                self.app.open_prompt(prompt.clone());
                self.app.inboxes.lock().expect("inboxes poisoned").remove(&prompt.id)?
            }
        };
        let answer = rx.recv_timeout(self.app.config.prompt_timeout).ok();
        let mut prompts = self.app.prompts.lock().expect("prompts poisoned");
        if let Some(slot) = prompts.get_mut(&prompt.id) {
            slot.state = PromptState::Closed;
        }
        // an answer may have landed between the timeout and taking the lock
        answer.or_else(|| rx.try_recv().ok())
    }
}
