//! Shared loop state and HTTP handlers.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use slotdisc::alcore::{ActiveLearner, PendingBatch};
use slotdisc::checkpoint::write_atomic;
use slotdisc::Corpus;

use crate::board::{AnnotationTask, BoardError, Suggestion, TaskBoard, TaskStatus};

pub const API_SCHEMA: &str = "1";
pub const STATE_FILE: &str = "state.ckpt";
pub const BOARD_FILE: &str = "board.json";
pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopPhase {
    Annotating,
    Retraining,
    Finished,
    Failed,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub state_dir: PathBuf,
    pub lease_ms: u64,
    pub suggestions: usize,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            state_dir: state_dir.into(),
            lease_ms: DEFAULT_LEASE_MS,
            suggestions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub known: bool,
    pub description: String,
    /// Iteration in which the slot became known; 0 for the warm-up.
    pub discovered_iteration: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressSnapshot {
    pub phase: LoopPhase,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub known_slot_count: usize,
    pub batch_completion: f64,
    pub latest_span_f1: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub span_f1: f64,
    pub known_slots: usize,
    pub new_slots_discovered: usize,
}

/// On-disk form of the board plus slot descriptions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct BoardFile {
    schema: String,
    board: Option<TaskBoard>,
    descriptions: BTreeMap<String, String>,
}

struct Inner {
    phase: LoopPhase,
    learner: Option<ActiveLearner>,
    board: Option<TaskBoard>,
    descriptions: BTreeMap<String, String>,
    progress: ProgressSnapshot,
    curve: (Option<CurvePoint>, Vec<CurvePoint>),
    slots: Vec<SlotInfo>,
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub struct Shared {
    config: ServiceConfig,
    inner: Mutex<Inner>,
    clock: Clock,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] slotdisc::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn system_clock() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn curve_of(learner: &ActiveLearner) -> (Option<CurvePoint>, Vec<CurvePoint>) {
    let mut discovered = 0;
    let mut points: Vec<CurvePoint> = learner
        .history()
        .iter()
        .map(|r| {
            if r.iteration > 0 {
                discovered += r.new_slots.len();
            }
            CurvePoint {
                iteration: r.iteration,
                labeled_fraction: r.labeled_fraction,
                span_f1: r.test.span_f1,
                known_slots: r.known_slots,
                new_slots_discovered: discovered,
            }
        })
        .collect();
    let start = (!points.is_empty()).then(|| points.remove(0));
    (start, points)
}

fn slots_of(learner: &ActiveLearner, descriptions: &BTreeMap<String, String>) -> Vec<SlotInfo> {
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    for r in learner.history() {
        for s in &r.new_slots {
            first_seen.entry(s).or_insert(r.iteration);
        }
    }
    let catalog = learner.model().catalog();
    catalog
        .labels()
        .iter()
        .enumerate()
        .map(|(i, name)| SlotInfo {
            name: name.clone(),
            known: catalog.is_known_index(i),
            description: descriptions.get(name).cloned().unwrap_or_default(),
            discovered_iteration: first_seen.get(name.as_str()).copied(),
        })
        .collect()
}

fn tasks_for(learner: &ActiveLearner, batch: &PendingBatch, suggestions: usize) -> Result<Vec<AnnotationTask>, ServiceError> {
    batch
        .span_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let (span, utt) = learner.corpus().span_with_utterance(id)?;
            let suggestions = learner
                .suggestions(id, suggestions)?
                .into_iter()
                .map(|(slot, probability)| Suggestion { slot, probability })
                .collect();
            Ok(AnnotationTask {
                task_id: format!("it{}-{k}", batch.iteration),
                span_id: id.clone(),
                utterance_id: utt.id.clone(),
                tokens: utt.tokens.clone(),
                start: span.start,
                length: span.length,
                weak_label: span.weak_label.clone(),
                suggestions,
                status: TaskStatus::Pending,
                annotator: None,
                lease_expiry_ms: None,
                label: None,
            })
        })
        .collect()
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.state_dir.join(name)
    }

    fn persist_board(&self, inner: &Inner) -> Result<(), ServiceError> {
        let file = BoardFile {
            schema: API_SCHEMA.to_owned(),
            board: inner.board.clone(),
            descriptions: inner.descriptions.clone(),
        };
        write_atomic(&self.path(BOARD_FILE), &serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    fn refresh(&self, inner: &mut Inner) {
        let Some(learner) = inner.learner.as_ref() else { return };
        inner.curve = curve_of(learner);
        inner.slots = slots_of(learner, &inner.descriptions);
        let last = learner.history().last();
        inner.progress = ProgressSnapshot {
            phase: inner.phase,
            iteration: learner.state().iteration,
            labeled_fraction: learner.state().pools.labeled_fraction(),
            known_slot_count: learner.model().catalog().known_count(),
            batch_completion: inner.board.as_ref().map_or(0.0, TaskBoard::completion_ratio),
            latest_span_f1: last.map_or(0.0, |r| r.test.span_f1),
            error: None,
        };
    }

    /// Installs the learner's pending batch (selecting one if needed) as the board.
    fn open_batch(&self, inner: &mut Inner) -> Result<(), ServiceError> {
        let learner = inner.learner.as_mut().expect("learner present while idle");
        match learner.next_batch()? {
            Some(batch) => {
                let reuse = inner
                    .board
                    .as_ref()
                    .is_some_and(|b| b.iteration == batch.iteration);
                if !reuse {
                    let tasks = tasks_for(learner, &batch, self.config.suggestions)?;
                    inner.board = Some(TaskBoard::new(batch.iteration, tasks, self.config.lease_ms));
                }
                inner.phase = LoopPhase::Annotating;
            }
            None => {
                inner.board = None;
                inner.phase = LoopPhase::Finished;
            }
        }
        learner.checkpoint(&self.path(STATE_FILE))?;
        self.persist_board(inner)?;
        self.refresh(inner);
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<(), ServiceError> {
        let inner = self.lock();
        if let Some(l) = inner.learner.as_ref() {
            l.checkpoint(&self.path(STATE_FILE))?;
        }
        self.persist_board(&inner)
    }

    pub fn progress(&self) -> ProgressSnapshot {
        self.lock().progress.clone()
    }

    pub fn phase(&self) -> LoopPhase {
        self.lock().phase
    }

    /// Hands the completed batch to a blocking worker that retrains and
    /// selects the next batch.
    fn start_retraining(self: &Arc<Self>, inner: &mut Inner) {
        let board = inner.board.clone().expect("board present");
        let mut learner = inner.learner.take().expect("learner present while annotating");
        for d in board.declared.values() {
            inner.descriptions.entry(d.name.clone()).or_insert_with(|| d.description.clone());
        }
        inner.phase = LoopPhase::Retraining;
        inner.progress.phase = LoopPhase::Retraining;
        inner.progress.batch_completion = 1.0;
        let shared = Arc::clone(self);
        let run = move || {
            let result = learner.complete_iteration(board.results());
            let mut inner = shared.lock();
            inner.learner = Some(learner);
            let outcome = result.map_err(ServiceError::from).and_then(|_| shared.open_batch(&mut inner));
            if let Err(e) = outcome {
                log::error!("retraining failed: {e}");
                inner.phase = LoopPhase::Failed;
                shared.refresh(&mut inner);
                inner.progress.error = Some(e.to_string());
            }
        };
        match tokio::runtime::Handle::try_current() {
            Ok(handle) => {
                handle.spawn_blocking(run);
            }
            Err(_) => run(),
        }
    }
}

pub struct Service {
    shared: Arc<Shared>,
}

impl Service {
    fn build(
        learner: ActiveLearner,
        board: Option<TaskBoard>,
        descriptions: BTreeMap<String, String>,
        config: ServiceConfig,
        clock: Clock,
    ) -> Result<Self, ServiceError> {
        fs::create_dir_all(&config.state_dir).map_err(|source| ServiceError::Io {
            path: config.state_dir.clone(),
            source,
        })?;
        let inner = Inner {
            phase: LoopPhase::Annotating,
            learner: Some(learner),
            board,
            descriptions,
            progress: ProgressSnapshot {
                phase: LoopPhase::Annotating,
                iteration: 0,
                labeled_fraction: 0.0,
                known_slot_count: 0,
                batch_completion: 0.0,
                latest_span_f1: 0.0,
                error: None,
            },
            curve: (None, Vec::new()),
            slots: Vec::new(),
        };
        let shared = Arc::new(Shared {
            config,
            inner: Mutex::new(inner),
            clock,
        });
        {
            let mut inner = shared.lock();
            shared.open_batch(&mut inner)?;
            if inner.board.as_ref().is_some_and(TaskBoard::is_complete) {
                shared.start_retraining(&mut inner);
            }
        }
        Ok(Service { shared })
    }

    /// Starts a fresh run from a warmed-up learner.
    pub fn start(learner: ActiveLearner, config: ServiceConfig) -> Result<Self, ServiceError> {
        Service::start_with_clock(learner, config, Arc::new(system_clock))
    }

    pub fn start_with_clock(learner: ActiveLearner, config: ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        Service::build(learner, None, BTreeMap::new(), config, clock)
    }

    /// Resumes from `state.ckpt` and `board.json` in the state directory.
    /// Assigned tasks go back to pending; a batch that was fully annotated
    /// before the restart is retrained immediately.
    pub fn resume(corpus: Corpus, config: ServiceConfig) -> Result<Self, ServiceError> {
        Service::resume_with_clock(corpus, config, Arc::new(system_clock))
    }

    pub fn resume_with_clock(corpus: Corpus, config: ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        let learner = ActiveLearner::resume(&config.state_dir.join(STATE_FILE), corpus)?;
        let board_path = config.state_dir.join(BOARD_FILE);
        let file: BoardFile = if board_path.exists() {
            let bytes = fs::read(&board_path).map_err(|source| ServiceError::Io {
                path: board_path.clone(),
                source,
            })?;
            serde_json::from_slice(&bytes)?
        } else {
            BoardFile::default()
        };
        let pending = learner.state().pending.as_ref().map(|p| p.iteration);
        let board = file.board.filter(|b| Some(b.iteration) == pending).map(|mut b| {
            b.release_all();
            b
        });
        Service::build(learner, board, file.descriptions, config, clock)
    }

    pub fn shared(&self) -> Arc<Shared> {
        Arc::clone(&self.shared)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/batch", get(get_batch))
            .route("/api/tasks/{id}/label", post(post_label))
            .route("/api/slots", get(get_slots).post(post_slot))
            .route("/api/progress", get(get_progress))
            .route("/api/curve", get(get_curve))
            .with_state(Arc::clone(&self.shared))
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"schema": API_SCHEMA, "error": self.1}))).into_response()
    }
}

impl From<BoardError> for ApiError {
    fn from(e: BoardError) -> Self {
        let code = match e {
            BoardError::UnknownTask(_) => StatusCode::NOT_FOUND,
            BoardError::NotLeased(..) | BoardError::LeaseExpired(_) | BoardError::AlreadyDone(_) => StatusCode::CONFLICT,
            BoardError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(code, e.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn ok(mut v: Value) -> Json<Value> {
    v["schema"] = json!(API_SCHEMA);
    Json(v)
}

#[derive(Deserialize)]
struct BatchQuery {
    annotator: Option<String>,
    max: Option<usize>,
}

async fn get_batch(State(s): State<Arc<Shared>>, Query(q): Query<BatchQuery>) -> Result<Json<Value>, ApiError> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "missing annotator".into()))?;
    let max = q.max.unwrap_or(10);
    let now = (s.clock)();
    let mut inner = s.lock();
    let phase = inner.phase;
    let iteration = inner.board.as_ref().map(|b| b.iteration);
    let tasks = match (&mut inner.board, phase) {
        (Some(board), LoopPhase::Annotating) => board.lease(&annotator, max, now),
        _ => Vec::new(),
    };
    if !tasks.is_empty() {
        s.persist_board(&inner)?;
    }
    Ok(ok(json!({"phase": phase, "iteration": iteration, "tasks": tasks})))
}

#[derive(Deserialize)]
struct NewSlot {
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct LabelBody {
    annotator: String,
    slot: Option<String>,
    new_slot: Option<NewSlot>,
    #[serde(default)]
    skip: bool,
}

async fn post_label(
    State(s): State<Arc<Shared>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabelBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let choices = usize::from(body.slot.is_some()) + usize::from(body.new_slot.is_some()) + usize::from(body.skip);
    if choices != 1 {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            "give exactly one of `slot`, `new_slot` or `skip`".into(),
        ));
    }
    let now = (s.clock)();
    let mut guard = s.lock();
    let inner = &mut *guard;
    let board = match (&mut inner.board, inner.phase) {
        (Some(b), LoopPhase::Annotating) => b,
        _ => {
            let exists = inner.board.as_ref().is_some_and(|b| b.tasks.iter().any(|t| t.task_id == id));
            return Err(if exists {
                ApiError(StatusCode::CONFLICT, "batch is no longer accepting labels".into())
            } else {
                BoardError::UnknownTask(id).into()
            });
        }
    };
    let catalog = inner.learner.as_ref().expect("learner present while annotating").model().catalog();
    let known = |l: &str| catalog.contains(l);
    let status = if body.skip {
        board.skip(&id, &body.annotator, now)?;
        TaskStatus::Skipped
    } else if let Some(new) = body.new_slot {
        if new.name.trim().is_empty() {
            return Err(BoardError::Validation("slot name must not be empty".into()).into());
        }
        if !board.tasks.iter().any(|t| t.task_id == id) {
            return Err(BoardError::UnknownTask(id).into());
        }
        board.declare(&new.name, &new.description)?;
        board.submit(&id, &body.annotator, &new.name, known, now)?;
        TaskStatus::Completed
    } else {
        board.submit(&id, &body.annotator, body.slot.as_deref().unwrap_or_default(), known, now)?;
        TaskStatus::Completed
    };
    let complete = board.is_complete();
    if complete {
        s.persist_board(inner)?;
        s.start_retraining(inner);
    } else {
        inner.progress.batch_completion = board.completion_ratio();
        s.persist_board(inner)?;
    }
    Ok(ok(json!({"task_id": id, "status": status, "phase": inner.phase})))
}

async fn post_slot(
    State(s): State<Arc<Shared>>,
    body: Result<Json<NewSlot>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let mut guard = s.lock();
    let inner = &mut *guard;
    let name = body.name.trim().to_owned();
    if name.is_empty() {
        return Err(BoardError::Validation("slot name must not be empty".into()).into());
    }
    let exists = inner
        .learner
        .as_ref()
        .is_some_and(|l| l.model().catalog().contains(&name));
    let created = match (&mut inner.board, inner.phase) {
        (Some(b), LoopPhase::Annotating) if !exists => b.declare(&name, &body.description)?,
        (_, LoopPhase::Annotating) => false,
        _ => return Err(ApiError(StatusCode::CONFLICT, "no batch is open".into())),
    };
    if created {
        s.persist_board(inner)?;
    }
    Ok(ok(json!({"name": name, "created": created})))
}

async fn get_progress(State(s): State<Arc<Shared>>) -> Json<Value> {
    let p = s.progress();
    ok(serde_json::to_value(p).expect("progress serializes"))
}

async fn get_curve(State(s): State<Arc<Shared>>) -> Json<Value> {
    let inner = s.lock();
    ok(json!({"start": inner.curve.0, "points": inner.curve.1}))
}

async fn get_slots(State(s): State<Arc<Shared>>) -> Json<Value> {
    let inner = s.lock();
    let mut slots = inner.slots.clone();
    if let (Some(b), LoopPhase::Annotating) = (&inner.board, inner.phase) {
        for d in b.declared.values() {
            if !slots.iter().any(|x| x.name == d.name) {
                slots.push(SlotInfo {
                    name: d.name.clone(),
                    known: false,
                    description: d.description.clone(),
                    discovered_iteration: None,
                });
            }
        }
    }
    ok(json!({"slots": slots}))
}
