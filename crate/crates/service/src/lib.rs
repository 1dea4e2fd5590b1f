//! HTTP front end for labeling sessions.
//!
//! Each session sits behind one mutex, so conflicting submissions are
//! serialized and exactly one of them wins. Fine-tuning and simulated runs
//! happen on blocking worker threads; readers only take the lock briefly.

pub mod api;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::Value;

use partlabel_core::audit::Clock;
use partlabel_core::dataset::{PreparationConfig, PreparedDataset};
use partlabel_core::oracle::{Oracle, OracleConfig};
use partlabel_core::proposer::baseline::{RandomProposer, UniformProposer};
use partlabel_core::proposer::builtin::{BuiltinProposer, CheckpointStore, ProposerConfig};
use partlabel_core::proposer::Proposer;
use partlabel_core::session::{working_tree, Annotator, Session, SessionError, SessionOptions, Task};
use partlabel_core::synthetic::{generate_dataset, SyntheticConfig};

use api::*;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub dataset_root: PathBuf,
    /// Saved proposers (`ProposerSpec::Model`) and fine-tuning checkpoints.
    pub model_store: Option<PathBuf>,
    pub audit_dir: PathBuf,
    pub points_per_shape: usize,
}

impl ServiceConfig {
    pub fn new(dataset_root: impl Into<PathBuf>, audit_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            dataset_root: dataset_root.into(),
            model_store: None,
            audit_dir: audit_dir.into(),
            points_per_shape: PreparationConfig::default().points_per_shape,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: message.into(),
                field: None,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::StaleBatch { .. } | SessionError::Training | SessionError::State(_) => StatusCode::CONFLICT,
            SessionError::Invalid(_) | SessionError::Modify(_) | SessionError::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            SessionError::Config(c) => Some(c.field.to_string()),
            _ => None,
        };
        ApiError {
            status,
            body: ErrorBody {
                error: e.to_string(),
                field,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Inner {
    session: Session,
    training: bool,
    failed: Option<String>,
    /// Accepted responses by idempotency key.
    responses: HashMap<String, Value>,
    last_verification: Option<(VerificationRequest, VerificationAccepted)>,
    last_modification: Option<(ModificationRequest, ModificationAccepted)>,
}

pub struct SessionSlot {
    id: String,
    mode: Mode,
    dataset: Arc<PreparedDataset>,
    audit_log: PathBuf,
    inner: Mutex<Inner>,
}

impl SessionSlot {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panicking worker leaves the session readable
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn status(&self) -> SessionStatus {
        let inner = self.lock();
        let s = &inner.session;
        let phase = if inner.failed.is_some() {
            "failed"
        } else if s.is_complete() {
            "complete"
        } else if matches!(s.next_task(), Task::Training(_)) {
            "training"
        } else if self.mode == Mode::Simulated {
            "running"
        } else {
            "awaiting_annotation"
        };
        SessionStatus {
            id: self.id.clone(),
            mode: self.mode,
            phase: phase.into(),
            error: inner.failed.clone(),
            dataset: s.state().dataset.clone(),
            shapes: s.state().shapes.len(),
            hours: s.state().ledger.report().hours,
            audit_log: self.audit_log.display().to_string(),
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    datasets: Mutex<HashMap<String, Arc<PreparedDataset>>>,
    sessions: Mutex<BTreeMap<String, Arc<SessionSlot>>>,
    created: Mutex<HashMap<String, String>>,
    create_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.audit_dir)?;
        Ok(Arc::new(AppState {
            config,
            datasets: Mutex::default(),
            sessions: Mutex::default(),
            created: Mutex::default(),
            create_lock: tokio::sync::Mutex::new(()),
        }))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    fn dataset(&self, dataset: &DatasetRef) -> ApiResult<Arc<PreparedDataset>> {
        let key = serde_json::to_string(dataset).expect("dataset ref serializes");
        if let Some(d) = self.datasets.lock().unwrap().get(&key) {
            return Ok(d.clone());
        }
        let prep = PreparationConfig {
            points_per_shape: self.config.points_per_shape,
            ..Default::default()
        };
        let loaded = match dataset {
            DatasetRef::Path(rel) => {
                let path = confined(&self.config.dataset_root, rel)
                    .ok_or_else(|| ApiError::bad_request(format!("dataset path `{rel}` must stay under the dataset root")))?;
                if !path.is_file() {
                    return Err(ApiError::bad_request(format!("unknown dataset `{rel}`")));
                }
                PreparedDataset::load(&path, &prep)
            }
            DatasetRef::Synthetic { synthetic } => {
                let cfg = SyntheticConfig {
                    family: synthetic.family,
                    shapes: synthetic.shapes,
                    seed: synthetic.seed,
                    symmetric_fraction: synthetic.symmetric_fraction,
                    id_prefix: synthetic.family.name().into(),
                    ..Default::default()
                };
                generate_dataset(&cfg, &PreparationConfig { seed: synthetic.seed, ..prep })
            }
        }
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let loaded = Arc::new(loaded);
        self.datasets.lock().unwrap().insert(key, loaded.clone());
        Ok(loaded)
    }

    fn proposer(&self, spec: &ProposerSpec, hierarchical: bool) -> ApiResult<Box<dyn Proposer>> {
        Ok(match spec {
            ProposerSpec::Uniform => Box::new(UniformProposer),
            ProposerSpec::Random { seed } => Box::new(RandomProposer::new(*seed)),
            ProposerSpec::Model { name } => {
                let store = self
                    .config
                    .model_store
                    .as_ref()
                    .ok_or_else(|| ApiError::bad_request("no model store configured"))?;
                let path = confined(store, name).ok_or_else(|| ApiError::bad_request(format!("bad model name `{name}`")))?;
                Box::new(BuiltinProposer::load(&path).map_err(|e| ApiError::bad_request(format!("model `{name}`: {e}")))?)
            }
            ProposerSpec::Pretrain { dataset, config } => {
                let train = self.dataset(dataset)?;
                let tree = working_tree(&train.tree, hierarchical);
                let cfg = config.clone().unwrap_or_else(ProposerConfig::default);
                Box::new(BuiltinProposer::pretrain(&tree, &train.shapes, cfg).map_err(|e| ApiError::bad_request(e.to_string()))?)
            }
        })
    }
}

/// `rel` joined to `root`, or None if it is absolute or climbs out.
fn confined(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    rel.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        .then(|| root.join(rel))
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Starts fine-tuning on a worker thread if the session is waiting for it.
fn kick_training(slot: &Arc<SessionSlot>) {
    let mut inner = slot.lock();
    if inner.training || inner.failed.is_some() || !matches!(inner.session.next_task(), Task::Training(_)) {
        return;
    }
    let (job, mut proposer) = match inner.session.training_job().and_then(|j| Ok((j, inner.session.take_proposer()?))) {
        Ok(x) => x,
        Err(e) => {
            inner.failed = Some(e.to_string());
            return;
        }
    };
    inner.training = true;
    let finetune = inner.session.state().config.use_proposer;
    let progress = inner.session.progress();
    drop(inner);
    let slot = slot.clone();
    std::thread::spawn(move || {
        let result = if finetune { proposer.finetune(&job, &progress) } else { Ok(()) };
        let mut inner = slot.lock();
        inner.training = false;
        match result.map_err(SessionError::from).and_then(|_| inner.session.finish_training(proposer)) {
            Ok(()) => {
                drop(inner);
                kick_training(&slot);
            }
            Err(e) => inner.failed = Some(e.to_string()),
        }
    });
}

/// Drives a simulated session to completion, one step per lock.
fn run_simulated(slot: Arc<SessionSlot>, oracle: OracleConfig) {
    let mut annotator = match Oracle::for_session(&slot.lock().session, oracle) {
        Ok(o) => o,
        Err(e) => {
            slot.lock().failed = Some(e);
            return;
        }
    };
    loop {
        let mut inner = slot.lock();
        let step = match inner.session.next_task() {
            Task::Done => return,
            Task::Training(_) => {
                let job = inner.session.training_job();
                let proposer = inner.session.take_proposer();
                let finetune = inner.session.state().config.use_proposer;
                let progress = inner.session.progress();
                drop(inner);
                let result = job.and_then(|job| {
                    let mut p = proposer?;
                    if finetune {
                        p.finetune(&job, &progress)?;
                    }
                    Ok(p)
                });
                inner = slot.lock();
                result.and_then(|p| inner.session.finish_training(p))
            }
            Task::Verify(t) => annotator
                .verify(&t)
                .map_err(SessionError::Annotator)
                .and_then(|v| inner.session.submit_verdicts(&t.batch_id, &v)),
            Task::Modify(t) => annotator
                .modify(&t)
                .map_err(SessionError::Annotator)
                .and_then(|m| inner.session.submit_modification(&t.shape, &m).map(|_| ())),
        };
        if let Err(e) = step {
            tracing::warn!(session = %slot.id, "simulation failed: {e}");
            inner.failed = Some(e.to_string());
            return;
        }
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionStatus>)> {
    let key = idempotency_key(&headers);
    let _guard = match &key {
        Some(_) => Some(app.create_lock.lock().await),
        None => None,
    };
    if let Some(id) = key.as_ref().and_then(|k| app.created.lock().unwrap().get(k).cloned()) {
        return Ok((StatusCode::CREATED, Json(app.session(&id)?.status())));
    }
    if let Err(e) = req.config.validate() {
        return Err(SessionError::from(e).into());
    }
    let app2 = app.clone();
    let slot = blocking(move || {
        let dataset = app2.dataset(&req.dataset)?;
        let proposer = app2.proposer(&req.proposer, req.config.hierarchical)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let audit_log = app2.config.audit_dir.join(format!("{id}.jsonl"));
        let options = SessionOptions {
            id: id.clone(),
            dataset: dataset.name.clone(),
            config: req.config,
            clock: match req.mode {
                Mode::Live => Clock::Wall,
                Mode::Simulated => Clock::Simulated,
            },
            audit_path: Some(audit_log.clone()),
            checkpoints: app2.config.model_store.as_ref().map(|m| CheckpointStore::new(m.join("checkpoints"))),
        };
        let session = Session::start(options, &dataset.tree, &dataset.shapes, proposer)?;
        Ok((
            Arc::new(SessionSlot {
                id,
                mode: req.mode,
                dataset,
                audit_log,
                inner: Mutex::new(Inner {
                    session,
                    training: false,
                    failed: None,
                    responses: HashMap::new(),
                    last_verification: None,
                    last_modification: None,
                }),
            }),
            req.oracle,
        ))
    })
    .await;
    let (slot, oracle) = slot?;
    app.sessions.lock().unwrap().insert(slot.id.clone(), slot.clone());
    if let Some(k) = key {
        app.created.lock().unwrap().insert(k, slot.id.clone());
    }
    tracing::info!(session = %slot.id, mode = ?slot.mode, "session created");
    match slot.mode {
        Mode::Live => kick_training(&slot),
        Mode::Simulated => {
            let s = slot.clone();
            std::thread::spawn(move || run_simulated(s, oracle));
        }
    }
    Ok((StatusCode::CREATED, Json(slot.status())))
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Vec<SessionStatus>> {
    let slots: Vec<_> = app.sessions.lock().unwrap().values().cloned().collect();
    Json(slots.iter().map(|s| s.status()).collect())
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionStatus>> {
    Ok(Json(app.session(&id)?.status()))
}

async fn next_task(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TaskEnvelope>> {
    let slot = app.session(&id)?;
    let inner = slot.lock();
    if let Some(e) = &inner.failed {
        return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("session failed: {e}")));
    }
    let tree = inner.session.state().tree.as_ref().expect("started session has a tree");
    Ok(Json(TaskEnvelope::from_task(inner.session.next_task(), tree)))
}

fn live(slot: &SessionSlot) -> ApiResult<()> {
    match slot.mode {
        Mode::Live => Ok(()),
        Mode::Simulated => Err(ApiError::new(StatusCode::CONFLICT, "simulated sessions take no submissions")),
    }
}

async fn submit_verification(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(req): Json<VerificationRequest>,
) -> ApiResult<Json<VerificationAccepted>> {
    let slot = app.session(&id)?;
    live(&slot)?;
    let key = idempotency_key(&headers).map(|k| format!("verify:{k}"));
    let s = slot.clone();
    let accepted = blocking(move || {
        let mut inner = s.lock();
        if let Some(prev) = key.as_ref().and_then(|k| inner.responses.get(k)) {
            let mut prev: VerificationAccepted = serde_json::from_value(prev.clone()).expect("stored response");
            prev.replayed = true;
            return Ok(prev);
        }
        if let Some((prev_req, prev)) = &inner.last_verification {
            if prev_req.batch_id == req.batch_id && same_verdicts(prev_req, &req) {
                return Ok(VerificationAccepted {
                    replayed: true,
                    ..prev.clone()
                });
            }
        }
        inner.session.submit_verdicts(&req.batch_id, &req.verdicts)?;
        let passed = req.verdicts.iter().filter(|v| v.pass).count();
        let accepted = VerificationAccepted {
            batch_id: req.batch_id.clone(),
            passed,
            failed: req.verdicts.len() - passed,
            replayed: false,
        };
        if let Some(k) = key {
            inner.responses.insert(k, serde_json::to_value(&accepted).expect("serializes"));
        }
        inner.last_verification = Some((req, accepted.clone()));
        Ok(accepted)
    })
    .await?;
    kick_training(&slot);
    Ok(Json(accepted))
}

fn same_verdicts(a: &VerificationRequest, b: &VerificationRequest) -> bool {
    let key = |r: &VerificationRequest| r.verdicts.iter().map(|v| (v.shape.clone(), v.pass)).collect::<BTreeMap<_, _>>();
    key(a) == key(b)
}

async fn submit_modification(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(req): Json<ModificationRequest>,
) -> ApiResult<Json<ModificationAccepted>> {
    let slot = app.session(&id)?;
    live(&slot)?;
    let key = idempotency_key(&headers).map(|k| format!("modify:{k}"));
    let s = slot.clone();
    let accepted = blocking(move || {
        let mut inner = s.lock();
        if let Some(prev) = key.as_ref().and_then(|k| inner.responses.get(k)) {
            let mut prev: ModificationAccepted = serde_json::from_value(prev.clone()).expect("stored response");
            prev.replayed = true;
            return Ok(prev);
        }
        if let Some((prev_req, prev)) = &inner.last_modification {
            if prev_req.shape == req.shape && prev_req.labels == req.labels {
                return Ok(ModificationAccepted {
                    replayed: true,
                    ..prev.clone()
                });
            }
        }
        let (node, parts) = match inner.session.next_task() {
            Task::Modify(t) if t.shape == req.shape => (t.node.id, t.parts),
            _ => return Err(ApiError::bad_request(format!("shape `{}` is not awaiting modification", req.shape))),
        };
        let outcome = inner.session.submit_modification(&req.shape, &req.labels)?;
        let accepted = ModificationAccepted {
            shape: req.shape.clone(),
            node,
            parts,
            labels: outcome.labels,
            edited: outcome.edited,
            checked: outcome.checked,
            replayed: false,
        };
        if let Some(k) = key {
            inner.responses.insert(k, serde_json::to_value(&accepted).expect("serializes"));
        }
        inner.last_modification = Some((req, accepted.clone()));
        Ok(accepted)
    })
    .await?;
    kick_training(&slot);
    Ok(Json(accepted))
}

async fn report(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let report = slot.lock().session.report();
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

#[derive(Deserialize)]
struct ShapeQuery {
    session: Option<String>,
}

async fn shape(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ShapeQuery>,
) -> ApiResult<Json<ShapePayload>> {
    let sid = q.session.ok_or_else(|| ApiError::bad_request("missing `session` query parameter"))?;
    let slot = app.session(&sid)?;
    let shape = slot
        .dataset
        .shape(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown shape `{id}`")))?;
    let inner = slot.lock();
    let state = inner.session.state();
    let tree = state.tree.as_ref().expect("started session has a tree");
    let paths = state.paths.get(&id);
    let parts = shape
        .parts
        .iter()
        .map(|p| {
            let path = paths.and_then(|m| m.get(&p.id)).cloned().unwrap_or_default();
            let label = path.last().cloned();
            let color = label.as_deref().and_then(|l| tree.color(l).ok()).unwrap_or([160, 160, 160]);
            PartPayload {
                id: p.id,
                points: p.points.clone(),
                obb: p.obb.clone(),
                path,
                label,
                color,
            }
        })
        .collect();
    let palette = tree.ids().filter_map(|l| tree.color(l).ok().map(|c| (l.to_string(), c))).collect();
    Ok(Json(ShapePayload {
        id: shape.id.clone(),
        session: sid,
        category: shape.category.clone(),
        parts,
        symmetry: shape.symmetry.clone(),
        palette,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/tasks/next", get(next_task))
        .route("/sessions/:id/verifications", post(submit_verification))
        .route("/sessions/:id/modifications", post(submit_modification))
        .route("/sessions/:id/report", get(report))
        .route("/shapes/:id", get(shape))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let app = router(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
