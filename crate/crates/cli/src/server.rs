//! HTTP service: interactive stepping sessions, verdict collection and the
//! success-rate summary over a rollout store.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use acwm::backend::WorldModelBackend;
use acwm::diffusion::TinyDenoiser;
use acwm::eval_harness::{
    adjudicate_auto, mean_delta_norm, now_epoch, summary_table, EpisodeConfig, EvalError, Label, RecordedChunk, RolloutRecord, Termination,
    Timing, Verdict,
};
use acwm::geometry::{ActionFrame, ActionState, ArmId};
use acwm::image::RgbImage;
use acwm::learned::{LearnedBackend, LearnedConfig};
use acwm::rollout::ChunkLoop;
use acwm::store::{RolloutStore, StoreError};
use acwm::world::{default_rig, OracleBackend, SceneConfig, WorldState};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Self { status, message: message.to_string() }
    }

    fn unprocessable(m: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }

    fn internal(m: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownRollout(_) => Self::new(StatusCode::NOT_FOUND, e),
            StoreError::Eval(EvalError::DuplicateVerdict { .. }) => Self::new(StatusCode::CONFLICT, e),
            other => Self::internal(other),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Session {
    id: String,
    backend_id: String,
    backend: Box<dyn WorldModelBackend>,
    lp: ChunkLoop,
    scene: SceneConfig,
    arm: ArmId,
    config: EpisodeConfig,
    record: RolloutRecord,
    started: Instant,
    terminated: bool,
}

struct Inner {
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    store: RolloutStore,
    model: Option<(TinyDenoiser, LearnedConfig)>,
    episode: EpisodeConfig,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(store_root: &Path, model: Option<(TinyDenoiser, LearnedConfig)>, episode: EpisodeConfig) -> Result<Self, StoreError> {
        let store = RolloutStore::open(store_root)?;
        Ok(Self { inner: Arc::new(Inner { sessions: Mutex::new(HashMap::new()), store, model, episode }) })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        let map = self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/rollouts", get(list_rollouts))
        .route("/rollouts/{id}", get(get_rollout))
        .route("/rollouts/{id}/frames/{view}/{file}", get(get_frame))
        .route("/rollouts/{id}/verdicts", post(post_verdict))
        .route("/reports/summary", get(summary))
        .with_state(state)
}

pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(ApiError::unprocessable)
}

fn encode_frames(frames: &[Vec<RgbImage>]) -> ApiResult<Vec<Vec<String>>> {
    frames.iter().map(|v| v.iter().map(|f| f.to_png_bytes().map(|b| B64.encode(b)).map_err(ApiError::internal)).collect()).collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRequest {
    id: Option<String>,
    scene_seed: Option<u64>,
    #[serde(default)]
    randomize: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    backend: String,
    #[serde(default)]
    task: Option<TaskRequest>,
    #[serde(default)]
    views: Option<Vec<String>>,
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateSession = parse(&body)?;
    let task = req.task.unwrap_or_default();
    let mut scene = match (task.randomize, task.scene_seed) {
        (true, seed) => SceneConfig::randomized(seed.unwrap_or(0)),
        (false, _) => SceneConfig::default(),
    };
    if let Some(id) = task.id {
        scene.task.id = id;
    }
    let views = req.views.unwrap_or_else(|| default_rig().views.iter().map(|v| v.name.clone()).collect());
    let rig = default_rig().select(&views).map_err(ApiError::unprocessable)?;
    rig.validate().map_err(ApiError::unprocessable)?;
    let oracle = OracleBackend::new(scene.clone(), rig.clone());
    let init = oracle.observe().map_err(ApiError::internal)?;
    let backend: Box<dyn WorldModelBackend> = match req.backend.as_str() {
        "oracle" => Box::new(oracle),
        "learned" => {
            let (m, c) = st.inner.model.as_ref().ok_or_else(|| ApiError::unprocessable("learned backend needs serve --checkpoint"))?;
            Box::new(LearnedBackend::new(m.clone(), c.clone(), rig.clone()).map_err(ApiError::internal)?.with_id("learned"))
        }
        other => return Err(ApiError::unprocessable(format!("unknown backend {other:?}"))),
    };
    let id = format!("session-{}", uuid::Uuid::new_v4().simple());
    let config = st.inner.episode;
    let init_action = vec![scene.gripper_start];
    let record = RolloutRecord {
        id: id.clone(),
        episode_id: id.clone(),
        task_id: scene.task.id.clone(),
        backend_id: backend.id().to_string(),
        policy_id: "interactive".into(),
        chunk_size: config.chunk,
        max_chunks: config.max_chunks,
        views: views.clone(),
        chunks: vec![],
        termination: Termination::MaxChunks,
        timing: Timing::default(),
        final_state: None,
    };
    let frames = encode_frames(&init.iter().map(|f| vec![f.clone()]).collect::<Vec<_>>())?;
    let session = Session {
        id: id.clone(),
        backend_id: backend.id().to_string(),
        backend,
        lp: ChunkLoop::new(init, init_action, config.memory),
        arm: scene.gripper_start.arm,
        scene,
        config,
        record,
        started: Instant::now(),
        terminated: false,
    };
    st.inner.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "views": views,
            "chunk_size": config.chunk,
            "max_chunks": config.max_chunks,
            "frames": frames,
        })),
    ))
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    session_id: String,
    backend: String,
    task_id: String,
    task: String,
    views: Vec<String>,
    chunk_size: usize,
    max_chunks: usize,
    chunks_done: usize,
    terminated: bool,
    termination: Option<Termination>,
    condition_action: Vec<[f64; 7]>,
    memory_len: usize,
    rollout_id: Option<String>,
    state: Option<WorldState>,
}

impl Session {
    fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            backend: self.backend_id.clone(),
            task_id: self.scene.task.id.clone(),
            task: self.scene.task.description.clone(),
            views: self.record.views.clone(),
            chunk_size: self.config.chunk,
            max_chunks: self.config.max_chunks,
            chunks_done: self.record.chunks.len(),
            terminated: self.terminated,
            termination: self.terminated.then(|| self.record.termination.clone()),
            condition_action: self.lp.condition_action.iter().map(ActionState::to_vector).collect(),
            memory_len: self.lp.memory.len(),
            rollout_id: self.terminated.then(|| self.record.id.clone()),
            state: self.backend.ground_truth().cloned(),
        }
    }

    fn step(&mut self, actions: Vec<ActionFrame>, store: &RolloutStore) -> ApiResult<Value> {
        let norm = mean_delta_norm(&self.lp.condition_action, &actions).map_err(ApiError::unprocessable)?;
        let t0 = Instant::now();
        let trace = match self.lp.step(self.backend.as_mut(), &actions) {
            Ok(t) => t,
            Err(e) => {
                self.terminated = true;
                self.record.termination = Termination::BackendError(e.to_string());
                self.finish(store)?;
                return Err(ApiError::internal(e));
            }
        };
        let frames = encode_frames(&trace.frames)?;
        let index = trace.index;
        self.record.chunks.push(RecordedChunk {
            index,
            actions: trace.actions,
            frame_hashes: trace.frames.iter().map(|v| v.iter().map(RgbImage::sha256).collect()).collect(),
            mean_delta_norm: norm,
            frames: trace.frames,
        });
        self.record.timing.per_chunk_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if norm < self.config.eps_term {
            self.terminated = true;
            self.record.termination = Termination::Threshold;
        } else if self.record.chunks.len() >= self.config.max_chunks {
            self.terminated = true;
            self.record.termination = Termination::MaxChunks;
        }
        let mut auto = None;
        if self.terminated {
            auto = self.finish(store)?;
        }
        Ok(json!({
            "session_id": self.id,
            "chunk_index": index,
            "views": self.record.views,
            "frames": frames,
            "mean_delta_norm": norm,
            "terminated": self.terminated,
            "termination": self.terminated.then(|| self.record.termination.clone()),
            "rollout_id": self.terminated.then(|| self.record.id.clone()),
            "auto_label": auto,
        }))
    }

    /// Stores the record; returns the simulator's own label when available.
    fn finish(&mut self, store: &RolloutStore) -> ApiResult<Option<Label>> {
        self.record.final_state = self.backend.ground_truth().cloned();
        self.record.timing.total_ms = self.started.elapsed().as_secs_f64() * 1e3;
        store.save(&self.record)?;
        Ok(adjudicate_auto(&self.record, &self.scene.task).ok().map(|v| v.label))
    }
}

async fn get_session(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    let s = st.session(&id)?;
    let guard = s.lock().await;
    Ok(Json(guard.summary()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    actions: Vec<Vec<f64>>,
}

fn parse_actions(req: StepRequest, k: usize, arm: ArmId) -> ApiResult<Vec<ActionFrame>> {
    if req.actions.len() != k {
        return Err(ApiError::unprocessable(format!("expected {k} actions, got {}", req.actions.len())));
    }
    req.actions
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let v: [f64; 7] = row.try_into().map_err(|r: Vec<f64>| ApiError::unprocessable(format!("action {i} has {} values, expected 7", r.len())))?;
            let s = ActionState::from_vector(arm, v);
            s.validate().map_err(|e| ApiError::unprocessable(format!("action {i}: {e}")))?;
            Ok(vec![s])
        })
        .collect()
}

async fn step_session(State(st): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let req: StepRequest = parse(&body)?;
    let mut guard = session.try_lock_owned().map_err(|_| ApiError::new(StatusCode::CONFLICT, "a step is already in progress for this session"))?;
    if guard.terminated {
        return Err(ApiError::new(StatusCode::CONFLICT, "session has terminated"));
    }
    let actions = parse_actions(req, guard.config.chunk, guard.arm)?;
    let inner = st.inner.clone();
    let out = tokio::task::spawn_blocking(move || guard.step(actions, &inner.store)).await.map_err(ApiError::internal)??;
    Ok(Json(out))
}

async fn list_rollouts(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    let records = st.inner.store.list()?;
    let verdicts = st.inner.store.verdicts()?;
    let rows: Vec<Value> = records
        .iter()
        .map(|r| {
            let vs: Vec<&Verdict> = verdicts.iter().filter(|v| v.rollout_id == r.id).collect();
            json!({
                "id": r.id,
                "task_id": r.task_id,
                "policy_id": r.policy_id,
                "backend_id": r.backend_id,
                "views": r.views,
                "chunks": r.chunks.len(),
                "termination": r.termination,
                "verdicts": vs,
            })
        })
        .collect();
    Ok(Json(json!({"rollouts": rows})))
}

async fn get_rollout(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RolloutRecord>> {
    Ok(Json(st.inner.store.load(&id, false)?))
}

async fn get_frame(State(st): State<AppState>, UrlPath((id, view, file)): UrlPath<(String, String, String)>) -> ApiResult<Response> {
    let record = st.inner.store.load(&id, false)?;
    let valid_name = file.len() == 10 && file.ends_with(".png") && file[..6].chars().all(|c| c.is_ascii_digit() || c == '_');
    if !record.views.contains(&view) || !valid_name {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no such frame"));
    }
    let path = st.inner.store.root().join("rollouts").join(&id).join(&view).join(&file);
    let bytes = tokio::fs::read(&path).await.map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "no such frame"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictRequest {
    evaluator: String,
    label: Label,
}

async fn post_verdict(State(st): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<(StatusCode, Json<Verdict>)> {
    let req: VerdictRequest = parse(&body)?;
    if req.evaluator.trim().is_empty() {
        return Err(ApiError::unprocessable("evaluator must not be empty"));
    }
    let v = Verdict { rollout_id: id, evaluator: req.evaluator, label: req.label, timestamp: now_epoch() };
    let inner = st.inner.clone();
    let stored = v.clone();
    tokio::task::spawn_blocking(move || inner.store.add_verdict(&stored)).await.map_err(ApiError::internal)??;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn summary(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    let rows = summary_table(&st.inner.store.list()?, &st.inner.store.verdicts()?);
    Ok(Json(json!({"rows": rows})))
}
