//! HTTP/JSON service. Engine calls run on the blocking pool; runs are
//! asynchronous and reported through polling tokens.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use branchsim::equivalence::{ObservationMode, Roi};
use branchsim::probe::encode_frames_binary;
use branchsim::scenario::{self, Report};
use branchsim::{
    extract_frame, frame_deltas, sample_point, Annotation, BranchOutcome, Engine, Error, Frame, FrameDelta, History,
    NodeId, ObservationSpec, ParamOverrides, ProbeQuery, RunRequest, ScenarioConfig,
};

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    engine: Engine,
    runs: Mutex<BTreeMap<u64, RunRecord>>,
    next_token: AtomicU64,
    save: Mutex<()>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub token: u64,
    pub node: NodeId,
    pub until_step: u64,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub existing: Option<NodeId>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState(Arc::new(Inner {
            engine,
            runs: Mutex::new(BTreeMap::new()),
            next_token: AtomicU64::new(1),
            save: Mutex::new(()),
        }))
    }

    pub fn engine(&self) -> &Engine {
        &self.0.engine
    }

    fn save(&self) -> branchsim::Result<()> {
        let _guard = self.0.save.lock().unwrap();
        self.0.engine.save()
    }

    /// Starts `job` on the blocking pool and returns its polling token.
    fn spawn_run(
        &self,
        node: NodeId,
        until_step: u64,
        job: impl FnOnce(&Engine) -> branchsim::Result<Value> + Send + 'static,
    ) -> u64 {
        let token = self.0.next_token.fetch_add(1, Ordering::Relaxed);
        let record = RunRecord { token, node, until_step, state: RunState::Running, error: None, result: None };
        self.0.runs.lock().unwrap().insert(token, record);
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = job(state.engine()).and_then(|v| state.save().map(|_| v));
            let mut runs = state.0.runs.lock().unwrap();
            let r = runs.get_mut(&token).expect("run record exists");
            match outcome {
                Ok(v) => {
                    r.state = RunState::Complete;
                    r.result = Some(v);
                }
                Err(e) => {
                    r.state = RunState::Failed;
                    r.error = Some(ErrorBody { error: e.kind().into(), message: e.to_string(), existing: None });
                }
            }
        });
        token
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownNode(_) | Error::StepNotStored { .. } => StatusCode::NOT_FOUND,
            Error::NotYetSimulated { .. } | Error::NodeBusy(_) | Error::TreeIncomplete(_) => StatusCode::CONFLICT,
            Error::InvalidSpec(_)
            | Error::InvalidSeed(_)
            | Error::UnstableParams(_)
            | Error::InvalidAnnotation(_)
            | Error::InvalidObservation(_)
            | Error::InvalidClassCount { .. }
            | Error::InvalidWorkerCount
            | Error::InvalidProbe(_)
            | Error::InvalidRange { .. }
            | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, body: ErrorBody { error: e.kind().into(), message: e.to_string(), existing: None } }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::from(Error::Config(r.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&AppState) -> branchsim::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::from(Error::Config(format!("worker panicked: {e}"))))?
        .map_err(ApiError::from)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/simulations", post(create_simulation))
        .route("/nodes/{id}/run", post(run_node))
        .route("/nodes/{id}/branch", post(branch_node))
        .route("/nodes/{id}/frames", get(frames))
        .route("/nodes/{id}/probe", get(probe))
        .route("/tree", get(tree))
        .route("/report", get(report))
        .route("/runs/{token}", get(run_status))
        .with_state(state)
}

async fn create_simulation(
    State(state): State<AppState>,
    body: Result<Json<ScenarioConfig>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(cfg) = body?;
    let cfg2 = cfg.clone();
    let root = blocking(&state, move |s| {
        let root = scenario::create_simulation(s.engine(), &cfg2)?;
        s.save()?;
        Ok(root)
    })
    .await?;
    let token = state.spawn_run(root, cfg.horizon, move |engine| {
        let out = scenario::develop(engine, &cfg, root)?;
        Ok(json!({ "root": out.root, "branches": out.branches, "completed": out.run.completed, "failed": out.run.failed }))
    });
    Ok((StatusCode::CREATED, Json(json!({ "root": root, "token": token }))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    until: u64,
    #[serde(default = "yes")]
    incremental: bool,
}

fn yes() -> bool {
    true
}

async fn run_node(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    body: Result<Json<RunBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let node = NodeId(id);
    state.engine().node(node)?;
    let request = RunRequest { node, until_step: body.until, incremental: body.incremental };
    let token = state.spawn_run(node, body.until, move |engine| Ok(serde_json::to_value(engine.run(request)?)?));
    Ok((StatusCode::ACCEPTED, Json(json!({ "token": token }))).into_response())
}

async fn run_status(State(state): State<AppState>, Path(token): Path<u64>) -> ApiResult<Json<RunRecord>> {
    let runs = state.0.runs.lock().unwrap();
    match runs.get(&token) {
        Some(r) => Ok(Json(r.clone())),
        None => Err(ApiError {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody {
                error: "UnknownRun".into(),
                message: format!("no run with token {token}"),
                existing: None,
            },
        }),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchBody {
    at_step: u64,
    #[serde(default)]
    overrides: ParamOverrides,
    #[serde(default)]
    annotations: Vec<Annotation>,
}

async fn branch_node(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    body: Result<Json<BranchBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let outcome = blocking(&state, move |s| {
        body.annotations.iter().try_for_each(Annotation::check)?;
        let outcome = s.engine().branch_at(NodeId(id), body.at_step, body.overrides)?;
        if let BranchOutcome::Created(child) = outcome {
            for a in body.annotations {
                s.engine().annotate(child, a.kind, a.text)?;
            }
            s.save()?;
        }
        Ok(outcome)
    })
    .await?;
    match outcome {
        BranchOutcome::Created(child) => Ok((StatusCode::CREATED, Json(json!({ "id": child }))).into_response()),
        BranchOutcome::Existing(existing) => Err(ApiError {
            status: StatusCode::CONFLICT,
            body: ErrorBody {
                error: "DuplicateBranch".into(),
                message: format!("node {id} already has this branch as node {existing}"),
                existing: Some(existing),
            },
        }),
    }
}

#[derive(Debug, Deserialize)]
struct FramesQuery {
    from: u64,
    to: u64,
    #[serde(default)]
    delta: bool,
}

/// Frames folded client-side: the first frame in full, then one delta per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaFrames {
    pub first: Frame,
    pub deltas: Vec<FrameDelta>,
}

async fn frames(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<FramesQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let binary = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/octet-stream"));
    let node = NodeId(id);
    if q.from > q.to {
        return Err(Error::InvalidRange { from: q.from, to: q.to }.into());
    }
    if q.delta || binary {
        let body = blocking(&state, move |s| {
            let first = extract_frame(s.engine(), node, q.from)?;
            let deltas = if q.to > q.from { frame_deltas(s.engine(), node, q.from, q.to)? } else { Vec::new() };
            Ok(DeltaFrames { first, deltas })
        })
        .await?;
        if binary {
            let bytes = encode_frames_binary(&state.engine().spec()?, &body.first, &body.deltas);
            return Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response());
        }
        return Ok(Json(body).into_response());
    }
    let frames = blocking(&state, move |s| {
        (q.from..=q.to).map(|t| extract_frame(s.engine(), node, t)).collect::<branchsim::Result<Vec<_>>>()
    })
    .await?;
    Ok(Json(frames).into_response())
}

#[derive(Debug, Deserialize)]
struct ProbeParams {
    x: f64,
    y: f64,
    step: u64,
}

async fn probe(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Query(p): Query<ProbeParams>,
) -> ApiResult<Json<Value>> {
    let q = ProbeQuery { node: NodeId(id), x: p.x, y: p.y, step: p.step };
    let value = blocking(&state, move |s| sample_point(s.engine(), &q)).await?;
    Ok(Json(json!({ "node": id, "x": p.x, "y": p.y, "step": p.step, "value": value })))
}

async fn tree(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let engine = state.engine();
    Ok(Json(json!({ "spec": engine.store().spec(), "trees": engine.trees() })))
}

#[derive(Debug, Default, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    mode: ObservationMode,
    x: Option<usize>,
    y: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
}

async fn report(State(state): State<AppState>, Query(q): Query<ReportQuery>) -> ApiResult<Json<Report>> {
    let obs = match q.mode {
        ObservationMode::FullState => ObservationSpec::full_state(),
        ObservationMode::RegionOfInterest => ObservationSpec::region(Roi {
            x: q.x.unwrap_or(0),
            y: q.y.unwrap_or(0),
            width: q.width.unwrap_or(0),
            height: q.height.unwrap_or(0),
        }),
    };
    Ok(Json(blocking(&state, move |s| scenario::report(s.engine(), &obs)).await?))
}
