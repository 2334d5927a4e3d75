use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::app::{AnswerError, App, Experiment, Phase, ProductionError, SubmitError};
use xpflow_core::events::{Event, EventKind};
use xpflow_core::interaction::Response as PromptResponse;
use xpflow_core::knowledge::{recommend, KrError, LineageQuery, RecommendContext, Relation};
use xpflow_core::{canonical_form, check_semantics, parse_experiment};

pub fn router(app: App) -> Router {
    Router::new()
        .route("/experiments", post(submit).get(list))
        .route("/experiments/{id}", get(detail))
        .route("/experiments/{id}/runs", get(runs))
        .route("/experiments/{id}/events", get(events))
        .route("/experiments/{id}/production-metrics", post(production))
        .route("/prompts/{id}/response", post(respond))
        .route("/kr/recommendations", get(recommendations))
        .route("/kr/lineage", get(lineage))
        .with_state(app)
}

pub struct ApiError(StatusCode, Value);

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError(status, json!({"error": message.into()}))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn find(app: &App, id: &str) -> ApiResult<Arc<Experiment>> {
    app.experiment(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no experiment `{id}`")))
}

async fn submit(State(app): State<App>, body: String) -> ApiResult<(StatusCode, Json<Value>)> {
    let spec = parse_experiment(&body).map_err(|errors| {
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({"error": "syntax", "errors": errors}),
        )
    })?;
    let report = check_semantics(&spec);
    if !report.is_ok() {
        let issues: Vec<String> = report.issues.iter().map(ToString::to_string).collect();
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({"error": "semantics", "issues": issues}),
        ));
    }
    match app.submit(spec) {
        Ok(id) => Ok((StatusCode::CREATED, Json(json!({"id": id})))),
        Err(SubmitError::Duplicate(name)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("experiment `{name}` already exists"),
        )),
    }
}

fn summary(exp: &Experiment) -> Value {
    let view = exp.snapshot();
    json!({
        "id": view.id,
        "phase": view.phase,
        "runs": view.runs.len(),
        "winner": view.report.as_ref().and_then(|r| r.winner.clone()),
        "origin": view.origin,
    })
}

async fn list(State(app): State<App>) -> Json<Vec<Value>> {
    Json(app.experiments().iter().map(|e| summary(e)).collect())
}

async fn detail(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let exp = find(&app, &id)?;
    let view = exp.snapshot();
    Ok(Json(json!({
        "id": view.id,
        "phase": view.phase,
        "source": canonical_form(&exp.spec),
        "intent": exp.spec.intent,
        "strategy": exp.spec.strategy,
        "runs": view.runs.len(),
        "pending_prompt": view.pending_prompt,
        "budget": view.report.as_ref().map(|r| r.budget),
        "report": view.report,
        "error": view.error,
        "origin": view.origin,
        "production": view.production,
        "events": exp.events.len(),
    })))
}

async fn runs(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let exp = find(&app, &id)?;
    Ok(Json(json!(exp.snapshot().runs)))
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

fn to_sse(event: &Event) -> SseEvent {
    SseEvent::default()
        .id(event.seq.to_string())
        .event(format!("{:?}", event.kind))
        .data(serde_json::to_string(event).expect("events serialize"))
}

const RECHECK: std::time::Duration = std::time::Duration::from_millis(500);

struct Cursor {
    exp: Arc<Experiment>,
    live: tokio::sync::broadcast::Receiver<Event>,
    queue: VecDeque<Event>,
    next: u64,
    done: bool,
}

impl Cursor {
    async fn next_event(&mut self) -> Option<Event> {
        loop {
            if let Some(event) = self.queue.pop_front() {
                if event.seq < self.next {
                    continue;
                }
                self.next = event.seq + 1;
                self.done |= event.kind == EventKind::ExperimentFinished;
                return Some(event);
            }
            // after the finish only what was already logged is replayed
            if self.done {
                return None;
            }
            let settled = matches!(self.exp.snapshot().phase, Phase::Finished | Phase::Failed);
            if settled && self.exp.events.len() as u64 <= self.next {
                return None;
            }
            // wake up now and then: a cursor past the end never sees a live event
            let Ok(received) = tokio::time::timeout(RECHECK, self.live.recv()).await else {
                continue;
            };
            match received {
                Ok(event) if event.experiment == self.exp.spec.name => self.queue.push_back(event),
                Ok(_) => {}
                Err(RecvError::Lagged(_)) => self.queue.extend(self.exp.events.since(self.next)),
                Err(RecvError::Closed) => return None,
            }
        }
    }
}

/// Replays the experiment's events from `since`, then follows live ones.
/// The stream ends once `ExperimentFinished` and the backlog are sent.
async fn events(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(q): Query<SinceQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let exp = find(&app, &id)?;
    // subscribe before reading the backlog so nothing falls in between
    let live = app.subscribe();
    let cursor = Cursor {
        queue: exp.events.since(q.since).into(),
        exp,
        live,
        next: q.since,
        done: false,
    };
    let stream = futures::stream::unfold(cursor, |mut c| async move {
        c.next_event().await.map(|e| (Ok(to_sse(&e)), c))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn respond(
    State(app): State<App>,
    Path(id): Path<String>,
    Json(response): Json<PromptResponse>,
) -> ApiResult<Json<Value>> {
    match app.answer(&id, response) {
        Ok(()) => Ok(Json(json!({"prompt": id, "accepted": true}))),
        Err(AnswerError::UnknownPrompt) => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no prompt `{id}`"))),
        Err(AnswerError::AlreadyResolved) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("prompt `{id}` is already resolved"),
        )),
        Err(AnswerError::Invalid(e)) => Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({"error": e.to_string(), "kind": format!("{e:?}")}),
        )),
    }
}

#[derive(Deserialize)]
struct ProductionBody {
    metric: Option<String>,
    value: Option<f64>,
    #[serde(default)]
    values: Vec<f64>,
    #[serde(default)]
    new_data: u64,
}

async fn production(
    State(app): State<App>,
    Path(id): Path<String>,
    Json(body): Json<ProductionBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut values = body.values;
    values.extend(body.value);
    let result = tokio::task::spawn_blocking(move || {
        app.ingest_production(&id, body.metric.as_deref(), &values, body.new_data)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(ack) if ack.retrain.is_some() => Ok((StatusCode::ACCEPTED, Json(json!(ack)))),
        Ok(ack) => Ok((StatusCode::OK, Json(json!(ack)))),
        Err(ProductionError::UnknownExperiment) => Err(ApiError::new(StatusCode::NOT_FOUND, "no such experiment")),
        Err(ProductionError::NotMonitored(m)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("metric `{m}` is not monitored by this experiment"),
        )),
    }
}

#[derive(Deserialize)]
struct RecommendQuery {
    user: Option<String>,
    dataset: Option<String>,
    intent: Option<String>,
    relation: String,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    5
}

fn kr_error(e: KrError) -> ApiError {
    let status = match e {
        KrError::Io(_) | KrError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    };
    ApiError::new(status, e.to_string())
}

async fn recommendations(State(app): State<App>, Query(q): Query<RecommendQuery>) -> ApiResult<Json<Value>> {
    let relation = Relation::parse(&q.relation)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown relation `{}`", q.relation)))?;
    let ctx = RecommendContext {
        user: q.user,
        dataset: q.dataset,
        intent: q.intent,
    };
    let recs = tokio::task::spawn_blocking(move || {
        let table = app.embeddings()?;
        recommend(&table, app.kr().state(), &ctx, relation, q.k)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(kr_error)?;
    Ok(Json(json!(recs)))
}

#[derive(Deserialize)]
struct LineageParams {
    experiment: Option<String>,
    dataset: Option<String>,
    fingerprint: Option<String>,
}

async fn lineage(State(app): State<App>, Query(q): Query<LineageParams>) -> ApiResult<Json<Value>> {
    let query = match (q.experiment, q.dataset, q.fingerprint) {
        (Some(e), None, None) => LineageQuery::Experiment(e),
        (None, Some(d), None) => LineageQuery::Dataset(d),
        (None, None, Some(f)) => LineageQuery::Fingerprint(f),
        _ => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "give exactly one of experiment, dataset or fingerprint",
            ))
        }
    };
    Ok(Json(json!(app.kr().lineage(&query))))
}
